//! Forward/backward primitives: 3x3 pad-1 convolution (stride 1 or 2),
//! group normalization, SiLU, nearest 2x upsampling, channel concat, and
//! dense linear layers. Backward passes are exact analytic gradients;
//! every one is covered by the finite-difference suite.

use super::Tensor;
use crate::{Error, Result};

/// Variance floor in group normalization.
pub const GN_EPS: f64 = 1e-5;

/// Output length of a 3x3 pad-1 convolution along one axis.
fn conv_out_dim(in_dim: usize, stride: usize) -> usize {
    (in_dim - 1) / stride + 1
}

/// Output index range [lo, hi) for kernel tap `k` so the input index
/// `o * stride + k - 1` stays inside [0, in_dim).
fn tap_range(k: usize, stride: usize, in_dim: usize, out_dim: usize) -> (usize, usize) {
    let lo = if k == 0 { 1usize.div_ceil(stride) } else { 0 };
    if in_dim < k {
        return (0, 0);
    }
    let hi = ((in_dim - k) / stride + 1).min(out_dim);
    (lo, hi.max(lo))
}

fn check_conv_shapes(x: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize) -> Result<(usize, usize, usize, usize)> {
    let (c_in, h, w) = x.dims3()?;
    let ws = weights.shape();
    if ws.len() != 4 || ws[1] != c_in || ws[2] != 3 || ws[3] != 3 {
        return Err(Error::shape(format!("conv weights {ws:?} do not match input channels {c_in}")));
    }
    let c_out = ws[0];
    if bias.shape() != [c_out] {
        return Err(Error::shape(format!("conv bias {:?} does not match {c_out} outputs", bias.shape())));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::invalid(format!("conv stride {stride} not in {{1, 2}}")));
    }
    Ok((c_in, h, w, c_out))
}

/// 3x3 cross-correlation with zero padding 1.
pub fn conv2d_fwd(x: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (c_in, h, w, c_out) = check_conv_shapes(x, weights, bias, stride)?;
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    let mut out = Tensor::zeros(&[c_out, oh, ow]);

    for co in 0..c_out {
        let plane = &mut out.data[co * oh * ow..(co + 1) * oh * ow];
        plane.fill(bias.data[co]);
        for ci in 0..c_in {
            let x_plane = &x.data[ci * h * w..(ci + 1) * h * w];
            let kernel = &weights.data[(co * c_in + ci) * 9..(co * c_in + ci) * 9 + 9];
            for ky in 0..3 {
                let (oy_lo, oy_hi) = tap_range(ky, stride, h, oh);
                for kx in 0..3 {
                    let (ox_lo, ox_hi) = tap_range(kx, stride, w, ow);
                    let wv = kernel[ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - 1;
                        let x_row = &x_plane[iy * w..iy * w + w];
                        let o_row = &mut plane[oy * ow..oy * ow + ow];
                        for ox in ox_lo..ox_hi {
                            o_row[ox] += wv * x_row[ox * stride + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out.debug_check_finite("conv2d_fwd");
    Ok(out)
}

/// Gradients of [`conv2d_fwd`] w.r.t. input, weights and bias.
pub fn conv2d_bwd(
    x: &Tensor,
    weights: &Tensor,
    stride: usize,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c_in, h, w) = x.dims3()?;
    let ws = weights.shape().to_vec();
    let c_out = ws[0];
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    if dout.shape() != [c_out, oh, ow] {
        return Err(Error::shape(format!("conv dout {:?} vs expected {:?}", dout.shape(), [c_out, oh, ow])));
    }

    let mut dx = Tensor::zeros(&[c_in, h, w]);
    let mut dw = Tensor::zeros(&ws);
    let mut db = Tensor::zeros(&[c_out]);

    for co in 0..c_out {
        let d_plane = &dout.data[co * oh * ow..(co + 1) * oh * ow];
        db.data[co] = d_plane.iter().sum();
        for ci in 0..c_in {
            let x_plane = &x.data[ci * h * w..(ci + 1) * h * w];
            let k_base = (co * c_in + ci) * 9;
            for ky in 0..3 {
                let (oy_lo, oy_hi) = tap_range(ky, stride, h, oh);
                for kx in 0..3 {
                    let (ox_lo, ox_hi) = tap_range(kx, stride, w, ow);
                    let wv = weights.data[k_base + ky * 3 + kx];
                    let mut grad_w = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - 1;
                        let x_row = &x_plane[iy * w..iy * w + w];
                        let d_row = &d_plane[oy * ow..oy * ow + ow];
                        let dx_row = &mut dx.data[ci * h * w + iy * w..ci * h * w + iy * w + w];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - 1;
                            grad_w += d_row[ox] * x_row[ix];
                            dx_row[ix] += wv * d_row[ox];
                        }
                    }
                    dw.data[k_base + ky * 3 + kx] += grad_w;
                }
            }
        }
    }
    Ok((dx, dw, db))
}

/// Saved forward state for the group-norm backward pass.
pub struct GroupNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    groups: usize,
}

/// Group normalization over (channels-in-group x spatial) with learned
/// per-channel scale and shift.
pub fn groupnorm_fwd(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
) -> Result<(Tensor, GroupNormCache)> {
    let (c, h, w) = x.dims3()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(format!("{groups} groups do not divide {c} channels")));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("groupnorm affine params must be per-channel"));
    }
    let spatial = h * w;
    let group_ch = c / groups;
    let group_len = group_ch * spatial;

    let mut xhat = Tensor::zeros(&[c, h, w]);
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut inv_std = vec![0.0; groups];

    for g in 0..groups {
        let span = g * group_len..(g + 1) * group_len;
        let xs = &x.data[span.clone()];
        let mean = xs.iter().sum::<f64>() / group_len as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
        let istd = 1.0 / (var + GN_EPS).sqrt();
        inv_std[g] = istd;
        for (i, &v) in xs.iter().enumerate() {
            xhat.data[span.start + i] = (v - mean) * istd;
        }
    }
    for ch in 0..c {
        let (g0, b0) = (gamma.data[ch], beta.data[ch]);
        for i in ch * spatial..(ch + 1) * spatial {
            out.data[i] = g0 * xhat.data[i] + b0;
        }
    }
    out.debug_check_finite("groupnorm_fwd");
    Ok((out, GroupNormCache { xhat, inv_std, groups }))
}

/// Gradients of [`groupnorm_fwd`] w.r.t. input, gamma and beta.
pub fn groupnorm_bwd(
    cache: &GroupNormCache,
    gamma: &Tensor,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, w) = cache.xhat.dims3()?;
    if dout.shape() != [c, h, w] {
        return Err(Error::shape("groupnorm dout shape mismatch"));
    }
    let spatial = h * w;
    let groups = cache.groups;
    let group_ch = c / groups;
    let group_len = group_ch * spatial;

    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut dg = 0.0;
        let mut db = 0.0;
        for i in ch * spatial..(ch + 1) * spatial {
            dg += dout.data[i] * cache.xhat.data[i];
            db += dout.data[i];
        }
        dgamma.data[ch] = dg;
        dbeta.data[ch] = db;
    }

    let mut dx = Tensor::zeros(&[c, h, w]);
    for g in 0..groups {
        let span = g * group_len..(g + 1) * group_len;
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for i in span.clone() {
            let dxhat = dout.data[i] * gamma.data[i / spatial];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * cache.xhat.data[i];
        }
        let n = group_len as f64;
        let istd = cache.inv_std[g];
        for i in span {
            let dxhat = dout.data[i] * gamma.data[i / spatial];
            dx.data[i] = istd * (dxhat - sum_dxhat / n - cache.xhat.data[i] * sum_dxhat_xhat / n);
        }
    }
    Ok((dx, dgamma, dbeta))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x * sigmoid(x)`.
pub fn silu_fwd(x: &Tensor) -> Tensor {
    let out = x.map(|v| v * sigmoid(v));
    out.debug_check_finite("silu_fwd");
    out
}

pub fn silu_bwd(x: &Tensor, dout: &Tensor) -> Result<Tensor> {
    if x.shape() != dout.shape() {
        return Err(Error::shape("silu dout shape mismatch"));
    }
    let data = x
        .data
        .iter()
        .zip(&dout.data)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (1.0 + v * (1.0 - s))
        })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Nearest-neighbor 2x spatial upsampling.
pub fn upsample_nearest2x_fwd(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let mut out = Tensor::zeros(&[c, h * 2, w * 2]);
    for ch in 0..c {
        for y in 0..h {
            for x_ in 0..w {
                let v = x.data[(ch * h + y) * w + x_];
                let base = ch * 4 * h * w;
                for dy in 0..2 {
                    for dx in 0..2 {
                        out.data[base + (2 * y + dy) * 2 * w + 2 * x_ + dx] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest2x_bwd(dout: &Tensor) -> Result<Tensor> {
    let (c, oh, ow) = dout.dims3()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::shape("upsample gradient dims must be even"));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x_ in 0..w {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx_ in 0..2 {
                        acc += dout.data[(ch * oh + 2 * y + dy) * ow + 2 * x_ + dx_];
                    }
                }
                dx.data[(ch * h + y) * w + x_] = acc;
            }
        }
    }
    Ok(dx)
}

/// Channel-dimension concatenation of two feature maps.
pub fn concat_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = a.dims3()?;
    let (cb, hb, wb) = b.dims3()?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::shape(format!("concat spatial dims {ha}x{wa} vs {hb}x{wb}")));
    }
    let mut data = Vec::with_capacity((ca + cb) * ha * wa);
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(&[ca + cb, ha, wa], data)
}

pub fn concat_bwd(dout: &Tensor, c_a: usize) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = dout.dims3()?;
    if c_a > c {
        return Err(Error::shape("concat split larger than tensor"));
    }
    let split = c_a * h * w;
    let da = Tensor::from_vec(&[c_a, h, w], dout.data[..split].to_vec())?;
    let db = Tensor::from_vec(&[c - c_a, h, w], dout.data[split..].to_vec())?;
    Ok((da, db))
}

/// Dense layer `y = W x + b` on 1-D vectors; `W` is `[out, in]`.
pub fn linear_fwd(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n_in = x.numel();
    let ws = weights.shape();
    if ws.len() != 2 || ws[1] != n_in {
        return Err(Error::shape(format!("linear weights {ws:?} vs input {n_in}")));
    }
    let n_out = ws[0];
    if bias.shape() != [n_out] {
        return Err(Error::shape("linear bias shape mismatch"));
    }
    let mut out = Tensor::zeros(&[n_out]);
    for o in 0..n_out {
        let row = &weights.data[o * n_in..(o + 1) * n_in];
        out.data[o] = bias.data[o] + row.iter().zip(&x.data).map(|(w, v)| w * v).sum::<f64>();
    }
    out.debug_check_finite("linear_fwd");
    Ok(out)
}

pub fn linear_bwd(x: &Tensor, weights: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let n_in = x.numel();
    let n_out = dout.numel();
    if weights.shape() != [n_out, n_in] {
        return Err(Error::shape("linear bwd shape mismatch"));
    }
    let mut dx = Tensor::zeros(&[n_in]);
    let mut dw = Tensor::zeros(&[n_out, n_in]);
    for o in 0..n_out {
        let d = dout.data[o];
        let row = &weights.data[o * n_in..(o + 1) * n_in];
        let dw_row = &mut dw.data[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            dx.data[i] += row[i] * d;
            dw_row[i] = x.data[i] * d;
        }
    }
    Ok((dx, dw, dout.clone()))
}
