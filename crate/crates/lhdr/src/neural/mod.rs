//! Minimal dense-tensor compute kernel.
//!
//! f64 everywhere on the training path, hand-written backward passes for
//! each primitive, a bias-corrected Adam, and a central finite-difference
//! gradient checker. No graphs: the exposure head wires forwards and
//! backwards explicitly.

mod gradcheck;
mod ops;
mod store;
mod tensor;

pub use gradcheck::grad_check;
pub use ops::{
    concat_bwd, concat_fwd, conv2d_bwd, conv2d_fwd, groupnorm_bwd, groupnorm_fwd, linear_bwd,
    linear_fwd, silu_bwd, silu_fwd, upsample_nearest2x_bwd, upsample_nearest2x_fwd, GroupNormCache,
    GN_EPS,
};
pub use store::{AdamConfig, ParamStore, WEIGHTS_MAGIC};
pub use tensor::Tensor;
