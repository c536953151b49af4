//! Central finite-difference validation of analytic gradients.

use super::ParamStore;
use crate::{Error, Result};

/// Checks every parameter's analytic gradient against central differences.
///
/// `backward` runs one forward+backward pass, returning the loss and filling
/// `store` gradients; `loss` is the matching pure forward evaluation. Returns
/// the maximum over parameters of `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(
    store: &mut ParamStore,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
    mut backward: impl FnMut(&mut ParamStore) -> Result<f64>,
    h: f64,
) -> Result<f64> {
    store.zero_grads();
    let base_loss = backward(store)?;
    if !base_loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {base_loss} during gradient check")));
    }
    let names = store.names();
    let analytic: Vec<(String, Vec<f64>)> =
        names.iter().map(|n| (n.clone(), store.grad(n).data.clone())).collect();

    let mut max_rel = 0.0f64;
    for (name, grads) in &analytic {
        for i in 0..grads.len() {
            let original = store.value(name).data[i];
            store.value_mut(name).data[i] = original + h;
            let f_plus = loss(store)?;
            store.value_mut(name).data[i] = original - h;
            let f_minus = loss(store)?;
            store.value_mut(name).data[i] = original;
            if !(f_plus.is_finite() && f_minus.is_finite()) {
                return Err(Error::NonFinite(format!("loss while perturbing {name}[{i}]")));
            }
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{linear_bwd, linear_fwd, Tensor};
    use crate::rng::SplitMix64;

    /// Linear model with squared loss: gradient is exact, so the check
    /// should come back at numerical-noise level.
    #[test]
    fn linear_model_squared_loss_near_exact() {
        let mut rng = SplitMix64::new(1);
        let x = Tensor::from_vec(&[4], (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect()).unwrap();
        let target = Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap();
        let mut store = ParamStore::new();
        store
            .register("w", Tensor::from_vec(&[2, 4], (0..8).map(|_| rng.next_range(-1.0, 1.0)).collect()).unwrap())
            .unwrap();
        store.register("b", Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap()).unwrap();

        let forward = |s: &ParamStore| -> Result<f64> {
            let y = linear_fwd(&x, s.value("w"), s.value("b"))?;
            Ok(y.data.iter().zip(&target.data).map(|(a, t)| (a - t) * (a - t)).sum())
        };
        let x2 = x.clone();
        let target2 = target.clone();
        let backward = move |s: &mut ParamStore| -> Result<f64> {
            let y = linear_fwd(&x2, s.value("w"), s.value("b"))?;
            let loss: f64 = y.data.iter().zip(&target2.data).map(|(a, t)| (a - t) * (a - t)).sum();
            let dy = Tensor::from_vec(
                &[2],
                y.data.iter().zip(&target2.data).map(|(a, t)| 2.0 * (a - t)).collect(),
            )?;
            let (_, dw, db) = linear_bwd(&x2, s.value("w"), &dy)?;
            s.accumulate_grad("w", &dw)?;
            s.accumulate_grad("b", &db)?;
            Ok(loss)
        };
        let err = grad_check(&mut store, forward, backward, 1e-4).unwrap();
        assert!(err < 1e-8, "max rel err {err}");
    }

    /// A sign-flipped backward pass must light up with error ~ 2.
    #[test]
    fn corrupted_backward_is_detected() {
        let x = Tensor::from_vec(&[3], vec![0.5, -0.25, 1.0]).unwrap();
        let mut store = ParamStore::new();
        store.register("w", Tensor::from_vec(&[1, 3], vec![0.2, 0.4, -0.6]).unwrap()).unwrap();
        store.register("b", Tensor::from_vec(&[1], vec![0.0]).unwrap()).unwrap();

        let forward = |s: &ParamStore| -> Result<f64> {
            let y = linear_fwd(&x, s.value("w"), s.value("b"))?;
            Ok(y.data[0] * y.data[0])
        };
        let x2 = x.clone();
        let backward = move |s: &mut ParamStore| -> Result<f64> {
            let y = linear_fwd(&x2, s.value("w"), s.value("b"))?;
            let dy = Tensor::from_vec(&[1], vec![-2.0 * y.data[0]])?; // wrong sign
            let (_, dw, db) = linear_bwd(&x2, s.value("w"), &dy)?;
            s.accumulate_grad("w", &dw)?;
            s.accumulate_grad("b", &db)?;
            Ok(y.data[0] * y.data[0])
        };
        let err = grad_check(&mut store, forward, backward, 1e-4).unwrap();
        assert!((err - 2.0).abs() < 1e-3, "expected ~2.0, got {err}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        let result = grad_check(
            &mut store,
            |_| Ok(f64::NAN),
            |s: &mut ParamStore| {
                s.accumulate_grad("w", &Tensor::from_vec(&[1], vec![1.0]).unwrap())?;
                Ok(f64::NAN)
            },
            1e-4,
        );
        assert!(result.is_err());
    }
}
