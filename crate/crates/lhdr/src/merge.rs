//! Radiance reconstruction from an exposure bracket.
//!
//! Each LDR frame is gamma-expanded to linear [0, 1], normalized by its
//! exposure scale `2^e`, and the per-pixel radiance is the weighted
//! log-domain mean of the normalized values, weights from a triangular hat
//! over the reliable range `[tau_black, tau_white]` that goes to zero when
//! any channel clips. Pixels invalid in every frame fall back to the
//! lowest-EV (shortest-exposure) estimate.
//!
//! The EV normalization is anchored at the bracket's lowest EV and the
//! remaining `2^-e_min` factor is applied after the exponential. Shifting
//! all EVs by an integer k while scaling the scene by 2^k then reproduces
//! the identical weighted quotient and changes the result by an exact
//! power-of-two factor.

use rayon::prelude::*;

use crate::bracket::{ev_scale, ExposureBracket, GAMMA};
use crate::imageio::{LdrImage, RadianceMap};
use crate::{Error, Result};

/// Floor applied inside the logarithm so dark samples stay finite.
const LOG_FLOOR: f64 = 1e-12;

/// How weights aggregate over color channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    /// One weight per pixel: zero if any channel clips, else the minimum
    /// channel hat value.
    #[default]
    PerPixel,
    /// Independent hat weight per channel.
    PerChannel,
}

/// Merge parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeConfig {
    pub tau_black: f64,
    pub tau_white: f64,
    pub eps: f64,
    pub gamma: f64,
    pub weight_mode: WeightMode,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self { tau_black: 0.05, tau_white: 0.95, eps: 1e-8, gamma: GAMMA, weight_mode: WeightMode::PerPixel }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_black > 0.0 && self.tau_black < 0.5) {
            return Err(Error::invalid(format!("tau_black {} outside (0, 0.5)", self.tau_black)));
        }
        if !(self.tau_white > 0.5 && self.tau_white < 1.0) {
            return Err(Error::invalid(format!("tau_white {} outside (0.5, 1)", self.tau_white)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::invalid("gamma must be positive"));
        }
        Ok(())
    }
}

/// Gamma-expanded image: linear RGB in [0, 1], f64 per channel.
#[derive(Debug, Clone)]
pub struct LinearImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl LinearImage {
    pub fn pixel(&self, idx: usize) -> [f64; 3] {
        [self.data[idx * 3], self.data[idx * 3 + 1], self.data[idx * 3 + 2]]
    }
}

/// `(v / 255)^gamma` per channel.
pub fn gamma_expand(img: &LdrImage) -> LinearImage {
    gamma_expand_with(img, GAMMA)
}

pub fn gamma_expand_with(img: &LdrImage, gamma: f64) -> LinearImage {
    let data = img.data.iter().map(|&v| (v as f64 / 255.0).powf(gamma)).collect();
    LinearImage { width: img.width, height: img.height, data }
}

/// Hat weight over the reliable range, peaking at 1 on the midpoint.
pub fn triangular_weight(v: f64, cfg: &MergeConfig) -> f64 {
    if v < cfg.tau_black || v > cfg.tau_white {
        return 0.0;
    }
    let half_width = (cfg.tau_white - cfg.tau_black) / 2.0;
    ((v - cfg.tau_black).min(cfg.tau_white - v)).max(0.0) / half_width
}

/// Per-pixel weight: zero if any channel clips, else the channel minimum.
pub fn pixel_weight(rgb_lin: [f64; 3], cfg: &MergeConfig) -> f64 {
    let mut w = f64::INFINITY;
    for v in rgb_lin {
        if v < cfg.tau_black || v > cfg.tau_white {
            return 0.0;
        }
        w = w.min(triangular_weight(v, cfg));
    }
    w
}

/// Weighted log-domain merge of the bracket into a radiance map.
pub fn merge_bracket(bracket: &ExposureBracket, cfg: &MergeConfig) -> Result<RadianceMap> {
    cfg.validate()?;
    let entries = bracket.entries();
    let (w, h) = (bracket.width(), bracket.height());
    let pixels = w * h;

    let linear: Vec<LinearImage> =
        entries.par_iter().map(|(_, img)| gamma_expand_with(img, cfg.gamma)).collect();

    // Anchor EV normalization at the lowest EV (entries are sorted).
    let e_min = entries[0].0 .0;
    let inv_scales: Vec<f64> = entries.iter().map(|(e, _)| 1.0 / ev_scale(e.0 - e_min)).collect();
    let anchor = ev_scale(-e_min);

    let data: Vec<f32> = (0..pixels)
        .into_par_iter()
        .flat_map_iter(|p| {
            let mut out = [0.0f32; 3];
            match cfg.weight_mode {
                WeightMode::PerPixel => {
                    let mut weight_sum = 0.0;
                    let mut log_sum = [0.0f64; 3];
                    for (frame, inv_scale) in linear.iter().zip(&inv_scales) {
                        let rgb = frame.pixel(p);
                        let weight = pixel_weight(rgb, cfg);
                        if weight > 0.0 {
                            weight_sum += weight;
                            for c in 0..3 {
                                log_sum[c] += weight * (rgb[c] * inv_scale).max(LOG_FLOOR).ln();
                            }
                        }
                    }
                    for c in 0..3 {
                        out[c] = if weight_sum > 0.0 {
                            ((log_sum[c] / (weight_sum + cfg.eps)).exp() * anchor) as f32
                        } else {
                            shortest_exposure_estimate(&linear[0], p, c, inv_scales[0], anchor)
                        };
                    }
                }
                WeightMode::PerChannel => {
                    for c in 0..3 {
                        let mut weight_sum = 0.0;
                        let mut log_sum = 0.0;
                        for (frame, inv_scale) in linear.iter().zip(&inv_scales) {
                            let v = frame.data[p * 3 + c];
                            let weight = triangular_weight(v, cfg);
                            if weight > 0.0 {
                                weight_sum += weight;
                                log_sum += weight * (v * inv_scale).max(LOG_FLOOR).ln();
                            }
                        }
                        out[c] = if weight_sum > 0.0 {
                            ((log_sum / (weight_sum + cfg.eps)).exp() * anchor) as f32
                        } else {
                            shortest_exposure_estimate(&linear[0], p, c, inv_scales[0], anchor)
                        };
                    }
                }
            }
            out
        })
        .collect();

    RadianceMap::new(w, h, data)
}

/// Fallback for pixels clipped in every frame: the lowest-EV frame's
/// normalized value, floored so the output stays strictly positive.
fn shortest_exposure_estimate(frame: &LinearImage, p: usize, c: usize, inv_scale: f64, anchor: f64) -> f32 {
    ((frame.data[p * 3 + c].max(LOG_FLOOR) * inv_scale) * anchor) as f32
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Saturation-driven blend mask: 1 where the input is near black or near
/// white (trust the reconstruction), 0 in reliable mid-tones (keep the
/// input's own linear values). Dark transition over [tau_black, 2*tau_black],
/// bright transition of the same width ending at tau_white.
pub fn blend_mask(max_channel_lin: f64, cfg: &MergeConfig) -> f64 {
    let dark = 1.0 - smoothstep(cfg.tau_black, 2.0 * cfg.tau_black, max_channel_lin);
    let bright = smoothstep(cfg.tau_white - 2.0 * cfg.tau_black, cfg.tau_white, max_channel_lin);
    (dark + bright).clamp(0.0, 1.0)
}

/// Fuses a reconstruction with the gamma-expanded input:
/// `m * hdr_pred + (1 - m) * input_linear` with `m` from [`blend_mask`].
pub fn blend_with_input(hdr_pred: &RadianceMap, ldr_input: &LdrImage, cfg: &MergeConfig) -> Result<RadianceMap> {
    cfg.validate()?;
    if hdr_pred.width != ldr_input.width || hdr_pred.height != ldr_input.height {
        return Err(Error::shape(format!(
            "blend inputs {}x{} vs {}x{}",
            hdr_pred.width, hdr_pred.height, ldr_input.width, ldr_input.height
        )));
    }
    let lin = gamma_expand_with(ldr_input, cfg.gamma);
    let data: Vec<f32> = (0..hdr_pred.width * hdr_pred.height)
        .into_par_iter()
        .flat_map_iter(|p| {
            let rgb = lin.pixel(p);
            let m = blend_mask(rgb[0].max(rgb[1]).max(rgb[2]), cfg);
            let mut out = [0.0f32; 3];
            for c in 0..3 {
                out[c] = (m * hdr_pred.data[p * 3 + c] as f64 + (1.0 - m) * rgb[c]) as f32;
            }
            out
        })
        .collect();
    RadianceMap::new(hdr_pred.width, hdr_pred.height, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bracket::{ev_range, generate_bracket, ExposureValue};
    use crate::imageio::RadianceMap;

    fn ev(e: f64) -> ExposureValue {
        ExposureValue::new(e).unwrap()
    }

    fn cfg() -> MergeConfig {
        MergeConfig::default()
    }

    #[test]
    fn gamma_expand_anchors() {
        let img = LdrImage::new(1, 1, vec![255, 0, 186]).unwrap();
        let lin = gamma_expand(&img);
        assert_eq!(lin.data[0], 1.0);
        assert_eq!(lin.data[1], 0.0);
        // (186/255)^2.2 evaluated independently at high precision.
        assert!((lin.data[2] - 0.4995).abs() < 5e-5, "got {}", lin.data[2]);
    }

    #[test]
    fn triangular_weight_shape() {
        let c = cfg();
        assert_eq!(triangular_weight(0.5, &c), 1.0);
        assert_eq!(triangular_weight(0.96, &c), 0.0);
        assert_eq!(triangular_weight(0.04, &c), 0.0);
        // min(0.15, 0.75) / 0.45
        assert!((triangular_weight(0.2, &c) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(triangular_weight(0.05, &c), 0.0);
    }

    #[test]
    fn pixel_weight_any_channel_rule() {
        let c = cfg();
        assert_eq!(pixel_weight([0.5, 0.5, 0.5], &c), 1.0);
        assert_eq!(pixel_weight([0.5, 0.99, 0.5], &c), 0.0);
        assert!((pixel_weight([0.2, 0.5, 0.5], &c) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn merge_round_trip_single_pixel() {
        let hdr = RadianceMap::new(1, 1, vec![0.25; 3]).unwrap();
        let bracket = generate_bracket(&hdr, &[ev(-1.0), ev(0.0), ev(1.0)]).unwrap();
        let merged = merge_bracket(&bracket, &cfg()).unwrap();
        for c in 0..3 {
            let rel = (merged.data[c] as f64 - 0.25).abs() / 0.25;
            assert!(rel < 0.02, "relative error {rel}");
        }
    }

    #[test]
    fn merge_single_exposure_equals_normalized_linear() {
        let hdr = RadianceMap::new(2, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])
            .unwrap();
        let bracket = generate_bracket(&hdr, &[ev(1.0)]).unwrap();
        let merged = merge_bracket(&bracket, &cfg()).unwrap();
        let lin = gamma_expand(&bracket.entries()[0].1);
        for (i, &v) in merged.data.iter().enumerate() {
            let expect = lin.data[i] / 2.0;
            assert!((v as f64 - expect).abs() <= expect * 1e-6, "{v} vs {expect}");
        }
    }

    #[test]
    fn merge_saturated_everywhere_uses_shortest_exposure() {
        // Radiance so high every frame clips white.
        let hdr = RadianceMap::new(1, 1, vec![1000.0; 3]).unwrap();
        let bracket = generate_bracket(&hdr, &[ev(-2.0), ev(0.0), ev(2.0)]).unwrap();
        let merged = merge_bracket(&bracket, &cfg()).unwrap();
        let lin0 = gamma_expand(&bracket.entries()[0].1); // lowest EV frame
        for c in 0..3 {
            let expect = lin0.data[c] / ev_scale(-2.0);
            assert_eq!(merged.data[c] as f64, expect);
        }
        assert!(merged.data.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn merge_all_black_stays_positive() {
        let hdr = RadianceMap::new(1, 1, vec![0.0; 3]).unwrap();
        let bracket = generate_bracket(&hdr, &ev_range(-2.0, 2.0, 1.0).unwrap()).unwrap();
        let merged = merge_bracket(&bracket, &cfg()).unwrap();
        assert!(merged.data.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn merge_entry_order_is_canonical() {
        let hdr = crate::scenegen::generate_scene(&crate::scenegen::SceneSpec {
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let evs = ev_range(-3.0, 3.0, 1.0).unwrap();
        let forward = generate_bracket(&hdr, &evs).unwrap();
        let mut entries = forward.entries().to_vec();
        entries.reverse();
        entries.swap(1, 4);
        let permuted = ExposureBracket::new(entries).unwrap();
        let a = merge_bracket(&forward, &cfg()).unwrap();
        let b = merge_bracket(&permuted, &cfg()).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn merge_scale_equivariance_exact() {
        let hdr = crate::scenegen::generate_scene(&crate::scenegen::SceneSpec {
            seed: 7,
            num_lights: 1,
            ..Default::default()
        })
        .unwrap();
        let evs = ev_range(-4.0, 4.0, 1.0).unwrap();
        let base = merge_bracket(&generate_bracket(&hdr, &evs).unwrap(), &cfg()).unwrap();
        for k in [-3i32, -1, 2, 3] {
            let shifted_evs: Vec<ExposureValue> =
                evs.iter().map(|e| ev(e.0 - k as f64)).collect();
            let scaled = hdr.scaled((k as f64).exp2() as f32);
            let merged =
                merge_bracket(&generate_bracket(&scaled, &shifted_evs).unwrap(), &cfg()).unwrap();
            let factor = (k as f64).exp2() as f32;
            for (a, b) in merged.data.iter().zip(&base.data) {
                assert_eq!(*a, b * factor, "k={k}");
            }
        }
    }

    #[test]
    fn per_channel_mode_merges_channels_independently() {
        let hdr = RadianceMap::new(1, 1, vec![0.1, 0.4, 8.0]).unwrap();
        let bracket = generate_bracket(&hdr, &ev_range(-4.0, 2.0, 1.0).unwrap()).unwrap();
        let c = MergeConfig { weight_mode: WeightMode::PerChannel, ..cfg() };
        let merged = merge_bracket(&bracket, &c).unwrap();
        for (i, truth) in [0.1f64, 0.4, 8.0].iter().enumerate() {
            let rel = (merged.data[i] as f64 - truth).abs() / truth;
            assert!(rel < 0.05, "channel {i} rel {rel}");
        }
    }

    #[test]
    fn blend_mask_extremes_and_midpoints() {
        let c = cfg();
        assert_eq!(blend_mask(0.5, &c), 0.0);
        assert_eq!(blend_mask(1.0, &c), 1.0);
        assert_eq!(blend_mask(0.0, &c), 1.0);
        // Half-value arguments of the two smoothstep transitions.
        assert!((blend_mask(0.075, &c) - 0.5).abs() < 1e-12);
        assert!((blend_mask(0.90, &c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn blend_passes_through_midtones_and_model_at_saturation() {
        let pred = RadianceMap::new(1, 2, vec![9.0; 6]).unwrap();
        // Top pixel mid-gray (186 -> lin 0.4995), bottom fully saturated.
        let input = LdrImage::new(1, 2, vec![186, 186, 186, 255, 255, 255]).unwrap();
        let out = blend_with_input(&pred, &input, &cfg()).unwrap();
        let lin = gamma_expand(&input);
        for c in 0..3 {
            assert_eq!(out.data[c], lin.data[c] as f32);
            assert_eq!(out.data[3 + c], 9.0);
        }
    }

    #[test]
    fn blend_dimension_mismatch() {
        let pred = RadianceMap::new(2, 2, vec![1.0; 12]).unwrap();
        let input = LdrImage::new(1, 1, vec![0, 0, 0]).unwrap();
        assert!(blend_with_input(&pred, &input, &cfg()).is_err());
    }

    #[test]
    fn expose_merge_round_trip_procedural() {
        let hdr = crate::scenegen::generate_scene(&crate::scenegen::SceneSpec {
            seed: 42,
            dr_target: 10.0,
            ..Default::default()
        })
        .unwrap();
        let bracket = generate_bracket(&hdr, &ev_range(-7.0, 5.0, 1.0).unwrap()).unwrap();
        let merged = merge_bracket(&bracket, &cfg()).unwrap();
        let stats = crate::metrics::relative_error_stats(&merged, &hdr).unwrap();
        assert!(stats.median <= 0.02, "median rel err {}", stats.median);
        assert!(stats.p99 <= 0.10, "p99 rel err {}", stats.p99);
    }
}
