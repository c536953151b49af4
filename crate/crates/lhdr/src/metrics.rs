//! Dynamic-range measurement, latent trajectory analysis, and end-to-end
//! LDR-to-HDR evaluation.

use rayon::prelude::*;

use crate::bracket::{ExposureBracket, ExposureValue};
use crate::head::ExposureMapper;
use crate::imageio::{LdrImage, RadianceMap};
use crate::latent::{decode, encode, Latent};
use crate::merge::{blend_with_input, merge_bracket, MergeConfig};
use crate::{Error, Result};

/// Default luminance percentiles for the stops metric.
pub const DEFAULT_PCT_LO: f64 = 0.1;
pub const DEFAULT_PCT_HI: f64 = 99.9;

/// Rec. 709 luma weights on linear RGB.
pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

/// Dynamic-range report in stops.
#[derive(Debug, Clone, PartialEq)]
pub struct StopsReport {
    pub p_low: f64,
    pub p_high: f64,
    pub stops: f64,
    /// True when the 20-stop floor on `p_low` engaged.
    pub clamped: bool,
}

/// Nearest-rank percentile of an ascending-sorted slice.
fn percentile_nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let rank = ((pct / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Measures `log2(p_high / p_low)` over per-pixel luminance percentiles.
///
/// `p_low` is floored at `p_high * 2^-20` so all-but-black pixels cannot
/// produce an unbounded span; the flag records when that floor engaged.
pub fn dynamic_range_stops(hdr: &RadianceMap, pct_lo: f64, pct_hi: f64) -> Result<StopsReport> {
    if !(0.0..100.0).contains(&pct_lo) || !(0.0..=100.0).contains(&pct_hi) || pct_lo >= pct_hi {
        return Err(Error::invalid(format!("bad percentile pair ({pct_lo}, {pct_hi})")));
    }
    let mut lum: Vec<f64> = hdr
        .data
        .chunks_exact(3)
        .map(|px| luminance([px[0] as f64, px[1] as f64, px[2] as f64]))
        .collect();
    if lum.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    lum.sort_by(|a, b| a.partial_cmp(b).expect("finite luminance"));
    let p_low = percentile_nearest_rank(&lum, pct_lo);
    let p_high = percentile_nearest_rank(&lum, pct_hi);
    if p_high <= 0.0 {
        return Err(Error::invalid("upper percentile luminance is zero"));
    }
    let floor = p_high * (-20.0f64).exp2();
    let clamped = p_low < floor;
    let p_low_eff = if clamped { floor } else { p_low };
    Ok(StopsReport { p_low, p_high, stops: (p_high / p_low_eff).log2(), clamped })
}

/// Relative-error summary after global median-scale alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    /// Median of gt / prediction, applied before measuring error.
    pub scale: f64,
    pub median: f64,
    pub p99: f64,
}

/// Per-element |s*pred - gt| / gt with s the median ratio; elements where
/// the ground truth is zero are skipped (no relative error is defined).
pub fn relative_error_stats(pred: &RadianceMap, gt: &RadianceMap) -> Result<ErrorStats> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut ratios: Vec<f64> = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(p, g)| **p > 0.0 && **g > 0.0)
        .map(|(p, g)| *g as f64 / *p as f64)
        .collect();
    if ratios.is_empty() {
        return Err(Error::invalid("no positive samples to align"));
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    let scale = percentile_nearest_rank(&ratios, 50.0);

    let mut errors: Vec<f64> = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(_, g)| **g > 0.0)
        .map(|(p, g)| (scale * *p as f64 - *g as f64).abs() / *g as f64)
        .collect();
    errors.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    Ok(ErrorStats {
        scale,
        median: percentile_nearest_rank(&errors, 50.0),
        p99: percentile_nearest_rank(&errors, 99.0),
    })
}

/// Latent distance-from-base trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryReport {
    /// (ev, d_gt, d_pred); distances normalized to a max of 1. d_gt is NaN
    /// when no ground-truth bracket was supplied.
    pub rows: Vec<(f64, f64, f64)>,
    /// Fraction of adjacent |e| pairs, per sign branch, with non-decreasing
    /// predicted distance.
    pub monotone_fraction: f64,
}

fn normalize_in_place(d: &mut [f64]) {
    let max = d.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in d {
            *v /= max;
        }
    }
}

/// Fraction of adjacent pairs along each |e| branch where `d` does not
/// decrease as |e| grows.
fn monotone_fraction(evs: &[f64], d: &[f64]) -> f64 {
    let mut neg: Vec<usize> = (0..evs.len()).filter(|&i| evs[i] <= 0.0).collect();
    neg.sort_by(|&a, &b| evs[b].partial_cmp(&evs[a]).unwrap()); // 0, -1, -2, ...
    let mut pos: Vec<usize> = (0..evs.len()).filter(|&i| evs[i] >= 0.0).collect();
    pos.sort_by(|&a, &b| evs[a].partial_cmp(&evs[b]).unwrap()); // 0, 1, 2, ...

    let mut pairs = 0usize;
    let mut good = 0usize;
    for branch in [&neg, &pos] {
        for pair in branch.windows(2) {
            pairs += 1;
            if d[pair[1]] >= d[pair[0]] {
                good += 1;
            }
        }
    }
    if pairs == 0 {
        1.0
    } else {
        good as f64 / pairs as f64
    }
}

/// Distances `||map(z, e) - z||` over the EV grid, plus the matching
/// ground-truth distances when an encoded bracket is supplied
/// (`gt_latents[i]` must correspond to `evs[i]`).
pub fn latent_trajectory(
    mapper: &impl ExposureMapper,
    z_base: &Latent,
    evs: &[f64],
    gt_latents: Option<&[Latent]>,
) -> Result<TrajectoryReport> {
    let base_idx = evs
        .iter()
        .position(|&e| e == 0.0)
        .ok_or_else(|| Error::invalid("trajectory needs EV = 0 in the grid"))?;
    if let Some(gt) = gt_latents {
        if gt.len() != evs.len() {
            return Err(Error::invalid("ground-truth bracket length != EV count"));
        }
    }

    let mut d_pred: Vec<f64> = Vec::with_capacity(evs.len());
    for &e in evs {
        let z_e = mapper.map_exposure(z_base, e)?;
        d_pred.push(z_e.l2_distance(z_base));
    }
    let mut d_gt: Vec<f64> = match gt_latents {
        Some(gt) => {
            let base = &gt[base_idx];
            gt.iter().map(|z| z.l2_distance(base)).collect()
        }
        None => vec![f64::NAN; evs.len()],
    };

    normalize_in_place(&mut d_pred);
    if gt_latents.is_some() {
        normalize_in_place(&mut d_gt);
    }
    let mono = monotone_fraction(evs, &d_pred);
    let rows = evs.iter().zip(&d_gt).zip(&d_pred).map(|((&e, &g), &p)| (e, g, p)).collect();
    Ok(TrajectoryReport { rows, monotone_fraction: mono })
}

/// Full image-to-HDR path: encode to the posterior mean, map every EV,
/// decode, merge, and optionally blend with the input.
pub fn reconstruct_l2h(
    input: &LdrImage,
    mapper: &impl ExposureMapper,
    factor: usize,
    evs: &[ExposureValue],
    merge_cfg: &MergeConfig,
    blend: bool,
) -> Result<RadianceMap> {
    let z_base = encode(input, factor, 0.0)?.mu;
    let entries = evs
        .iter()
        .map(|&e| {
            let z_e = mapper.map_exposure(&z_base, e.0)?;
            Ok((e, decode(&z_e, factor)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let bracket = ExposureBracket::new(entries)?;
    let merged = merge_bracket(&bracket, merge_cfg)?;
    if blend {
        blend_with_input(&merged, input, merge_cfg)
    } else {
        Ok(merged)
    }
}

/// One evaluated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub stops: f64,
    pub median_rel_err: f64,
    pub p99_rel_err: f64,
}

/// Aggregate evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_stops: f64,
    pub std_stops: f64,
    pub mean_median_rel_err: f64,
}

/// Evaluates a mapper over (input LDR, ground-truth HDR) pairs.
pub fn eval_l2h<M: ExposureMapper + Sync>(
    scenes: &[(LdrImage, RadianceMap)],
    mapper: &M,
    factor: usize,
    evs: &[ExposureValue],
    merge_cfg: &MergeConfig,
    blend: bool,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::invalid("evaluation corpus is empty"));
    }
    let rows: Vec<EvalRow> = scenes
        .par_iter()
        .map(|(input, gt)| {
            let recon = reconstruct_l2h(input, mapper, factor, evs, merge_cfg, blend)?;
            let stops = dynamic_range_stops(&recon, DEFAULT_PCT_LO, DEFAULT_PCT_HI)?;
            let err = relative_error_stats(&recon, gt)?;
            Ok(EvalRow { stops: stops.stops, median_rel_err: err.median, p99_rel_err: err.p99 })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = rows.len() as f64;
    let mean_stops = rows.iter().map(|r| r.stops).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r.stops - mean_stops) * (r.stops - mean_stops)).sum::<f64>() / n;
    let mean_median = rows.iter().map(|r| r.median_rel_err).sum::<f64>() / n;
    Ok(EvalReport { rows, mean_stops, std_stops: var.sqrt(), mean_median_rel_err: mean_median })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{ExposureHead, HeadConfig};
    use crate::rng::SplitMix64;

    #[test]
    fn luminance_values() {
        assert!((luminance([1.0, 1.0, 1.0]) - 1.0).abs() < 1e-12);
        assert_eq!(luminance([1.0, 0.0, 0.0]), 0.2126);
        assert_eq!(luminance([0.0, 0.0, 0.0]), 0.0);
    }

    fn two_level_map() -> RadianceMap {
        // 1000 pixels: half at 1.0, half at 1024.0.
        let mut data = Vec::with_capacity(1000 * 3);
        for i in 0..1000 {
            let v = if i < 500 { 1.0 } else { 1024.0 };
            data.extend_from_slice(&[v, v, v]);
        }
        RadianceMap::new(100, 10, data).unwrap()
    }

    #[test]
    fn stops_two_level_is_ten() {
        let report = dynamic_range_stops(&two_level_map(), 0.1, 99.9).unwrap();
        assert!((report.stops - 10.0).abs() < 1e-6, "stops {}", report.stops);
        assert_eq!(report.p_low, 1.0);
        assert_eq!(report.p_high, 1024.0);
        assert!(!report.clamped);
    }

    #[test]
    fn stops_constant_image_is_zero() {
        let img = RadianceMap::new(8, 8, vec![3.5; 192]).unwrap();
        let report = dynamic_range_stops(&img, 0.1, 99.9).unwrap();
        assert_eq!(report.stops, 0.0);
    }

    #[test]
    fn stops_matches_reported_relation() {
        // Consistency of stops = log2(p_high / p_low) against a published
        // (p_low, p_high, stops) triple: 3.80 / 1.43e-3 -> 11.37.
        let implied = (3.80f64 / 1.43e-3).log2();
        assert!((implied - 11.37).abs() < 0.02, "implied {implied}");
    }

    #[test]
    fn stops_scale_and_permutation_invariance() {
        let base = two_level_map();
        let a = dynamic_range_stops(&base, 0.1, 99.9).unwrap();

        let scaled = base.scaled(8.0); // exact power of two
        let b = dynamic_range_stops(&scaled, 0.1, 99.9).unwrap();
        assert_eq!(a.stops, b.stops);

        let scaled = base.scaled(1.7);
        let c = dynamic_range_stops(&scaled, 0.1, 99.9).unwrap();
        assert!((a.stops - c.stops).abs() < 1e-9);

        // Pixel permutation: reverse the pixel order.
        let mut data = Vec::with_capacity(base.data.len());
        for px in base.data.chunks_exact(3).rev() {
            data.extend_from_slice(px);
        }
        let permuted = RadianceMap::new(base.width, base.height, data).unwrap();
        let d = dynamic_range_stops(&permuted, 0.1, 99.9).unwrap();
        assert_eq!(a.stops, d.stops);
    }

    #[test]
    fn stops_clamps_at_twenty() {
        let mut data = vec![1.0f32; 300];
        for v in data.iter_mut().take(30) {
            *v = 0.0;
        }
        let img = RadianceMap::new(10, 10, data).unwrap();
        let report = dynamic_range_stops(&img, 0.1, 99.9).unwrap();
        assert!(report.clamped);
        assert!((report.stops - 20.0).abs() < 1e-9);
    }

    #[test]
    fn stops_rejects_bad_inputs() {
        let img = two_level_map();
        assert!(dynamic_range_stops(&img, 99.0, 1.0).is_err());
        let zeros = RadianceMap::new(4, 4, vec![0.0; 48]).unwrap();
        assert!(dynamic_range_stops(&zeros, 0.1, 99.9).is_err());
    }

    #[test]
    fn relative_error_detects_scale() {
        let gt = RadianceMap::new(2, 2, vec![1.0, 2.0, 4.0, 8.0, 1.0, 2.0, 4.0, 8.0, 1.0, 2.0, 4.0, 8.0])
            .unwrap();
        let pred = gt.scaled(0.25);
        let stats = relative_error_stats(&pred, &gt).unwrap();
        assert_eq!(stats.scale, 4.0);
        assert_eq!(stats.median, 0.0);
        assert_eq!(stats.p99, 0.0);
    }

    fn random_latent(seed: u64, c: usize, h: usize, w: usize) -> Latent {
        let mut rng = SplitMix64::new(seed);
        Latent {
            channels: c,
            height: h,
            width: w,
            data: (0..c * h * w).map(|_| rng.next_range(-0.5, 0.5)).collect(),
        }
    }

    #[test]
    fn trajectory_zero_init_head_is_flat() {
        let head = ExposureHead::new(HeadConfig::default(), 3).unwrap();
        let z = random_latent(4, 48, 16, 16);
        let evs: Vec<f64> = (-7..=5).map(|e| e as f64).collect();
        let report = latent_trajectory(&head, &z, &evs, None).unwrap();
        for (_, _, d_pred) in &report.rows {
            assert_eq!(*d_pred, 0.0);
        }
        assert_eq!(report.monotone_fraction, 1.0);
    }

    #[test]
    fn trajectory_gt_base_distance_is_zero() {
        let head = ExposureHead::new(HeadConfig::default(), 3).unwrap();
        let z = random_latent(5, 48, 16, 16);
        let evs = vec![-1.0, 0.0, 1.0];
        let gt = vec![random_latent(6, 48, 16, 16), z.clone(), random_latent(7, 48, 16, 16)];
        let report = latent_trajectory(&head, &z, &evs, Some(&gt)).unwrap();
        assert_eq!(report.rows[1].1, 0.0);
        assert!(report.rows[0].1 > 0.0);
        // Normalization: the max reported distance is 1.
        let max_gt = report.rows.iter().map(|r| r.1).fold(0.0f64, f64::max);
        assert_eq!(max_gt, 1.0);
    }

    #[test]
    fn trajectory_requires_base_ev() {
        let head = ExposureHead::new(HeadConfig::default(), 3).unwrap();
        let z = random_latent(8, 48, 16, 16);
        assert!(latent_trajectory(&head, &z, &[1.0, 2.0], None).is_err());
    }

    #[test]
    fn monotone_fraction_branches() {
        let evs = vec![-2.0, -1.0, 0.0, 1.0, 2.0];
        // Perfectly monotone in |e|.
        assert_eq!(monotone_fraction(&evs, &[0.9, 0.5, 0.0, 0.4, 0.8]), 1.0);
        // One violation on the negative branch (|e|=2 below |e|=1).
        let f = monotone_fraction(&evs, &[0.3, 0.5, 0.0, 0.4, 0.8]);
        assert!((f - 0.75).abs() < 1e-12, "fraction {f}");
    }

    #[test]
    fn eval_l2h_row_count_and_blend_toggle() {
        use crate::bracket::{ev_range, expose, ExposureValue};
        use crate::scenegen::{generate_corpus, SceneSpec};

        let corpus = generate_corpus(
            3,
            90,
            &SceneSpec { width: 32, height: 32, dr_target: 8.0, ..SceneSpec::default() },
        )
        .unwrap();
        let scenes: Vec<(LdrImage, RadianceMap)> = corpus
            .iter()
            .map(|hdr| (expose(hdr, ExposureValue::new(0.0).unwrap()).unwrap(), hdr.clone()))
            .collect();
        // Oracle mapper: returns the encoded true exposure latents.
        let data: Vec<RadianceMap> = corpus;
        let oracle = move |z: &Latent, ev: f64| -> Result<Latent> {
            // Identify the scene by matching its base latent.
            for hdr in &data {
                let base = encode(&expose(hdr, ExposureValue::new(0.0).unwrap())?, 4, 0.0)?.mu;
                if base.data == z.data {
                    let img = expose(hdr, ExposureValue::new(ev)?)?;
                    return Ok(encode(&img, 4, 0.0)?.mu);
                }
            }
            Err(Error::invalid("unknown scene".to_string()))
        };
        let evs = ev_range(-7.0, 5.0, 1.0).unwrap();
        let cfg = MergeConfig::default();
        let v2 = eval_l2h(&scenes, &oracle, 4, &evs, &cfg, false).unwrap();
        assert_eq!(v2.rows.len(), 3);
        // Oracle path reduces to the bracket-merge round trip.
        for row in &v2.rows {
            assert!(row.median_rel_err <= 0.02, "median {}", row.median_rel_err);
        }
        let v1 = eval_l2h(&scenes, &oracle, 4, &evs, &cfg, true).unwrap();
        assert_eq!(v1.rows.len(), 3);
        assert_ne!(v1.rows[0].stops, v2.rows[0].stops);
    }
}
