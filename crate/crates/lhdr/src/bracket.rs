//! LDR exposure-stack synthesis from HDR radiance.
//!
//! An exposure at EV `e` scales radiance by `2^e` in linear space, clips to
//! [0, 1], gamma-encodes with exponent 1/2.2 and quantizes as
//! `floor(255 * y)`. Exposure scaling is evaluated as
//! `exp2(fract(e)) * 2^floor(e)` so that shifting `e` by an integer is an
//! exact power-of-two rescale; this makes
//! `expose(hdr, e) == expose(scale(hdr, 2^k), e - k)` hold bit for bit.

use rayon::prelude::*;

use crate::imageio::{LdrImage, RadianceMap};
use crate::{Error, Result};

/// Gamma used for encoding (1/2.2) and expansion (2.2).
pub const GAMMA: f64 = 2.2;

/// Relative exposure offset in EV units (log2 of exposure time).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ExposureValue(pub f64);

impl ExposureValue {
    pub fn new(ev: f64) -> Result<Self> {
        if !ev.is_finite() {
            return Err(Error::invalid(format!("exposure value {ev} is not finite")));
        }
        Ok(Self(ev))
    }

    /// Linear exposure scale `2^e`, with the integer part applied as an
    /// exact power of two.
    pub fn scale(self) -> f64 {
        ev_scale(self.0)
    }
}

/// `2^e` split as `exp2(e - floor(e)) * 2^floor(e)`.
///
/// The split guarantees `ev_scale(e - k) == ev_scale(e) * 2^-k` exactly for
/// integer `k`, which the radiometric-scaling invariants rely on.
pub fn ev_scale(e: f64) -> f64 {
    let ei = e.floor();
    let ef = e - ei;
    ef.exp2() * ei.exp2()
}

/// Ordered list of (EV, image) pairs of one scene.
///
/// Entries are kept sorted by EV regardless of construction order, so any
/// consumer sees one canonical ordering.
#[derive(Debug, Clone)]
pub struct ExposureBracket {
    entries: Vec<(ExposureValue, LdrImage)>,
}

impl ExposureBracket {
    pub fn new(mut entries: Vec<(ExposureValue, LdrImage)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("bracket must contain at least one exposure"));
        }
        entries.sort_by(|a, b| a.0 .0.partial_cmp(&b.0 .0).expect("finite EVs"));
        for pair in entries.windows(2) {
            if pair[0].0 .0 == pair[1].0 .0 {
                return Err(Error::invalid(format!("duplicate EV {}", pair[0].0 .0)));
            }
        }
        let (w, h) = (entries[0].1.width, entries[0].1.height);
        if entries.iter().any(|(_, img)| img.width != w || img.height != h) {
            return Err(Error::shape("bracket images must share dimensions"));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(ExposureValue, LdrImage)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn width(&self) -> usize {
        self.entries[0].1.width
    }

    pub fn height(&self) -> usize {
        self.entries[0].1.height
    }

    /// True when an EV = 0 entry is present (required for head training).
    pub fn has_base(&self) -> bool {
        self.entries.iter().any(|(ev, _)| ev.0 == 0.0)
    }
}

/// Per-EV clipping percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct ClippingStats {
    /// (ev, dark %, highlight %) per exposure, in bracket order.
    pub per_ev: Vec<(f64, f64, f64)>,
}

/// Renders one LDR exposure: `floor(255 * clip(v * 2^e, 0, 1)^(1/2.2))`.
pub fn expose(hdr: &RadianceMap, e: ExposureValue) -> Result<LdrImage> {
    if !e.0.is_finite() {
        return Err(Error::invalid("exposure value must be finite"));
    }
    let scale = e.scale();
    let inv_gamma = 1.0 / GAMMA;
    let data: Vec<u8> = hdr
        .data
        .par_iter()
        .map(|&v| {
            let lin = (v as f64 * scale).clamp(0.0, 1.0);
            (255.0 * lin.powf(inv_gamma)).floor() as u8
        })
        .collect();
    LdrImage::new(hdr.width, hdr.height, data)
}

/// Renders the full bracket at the given EVs (strictly increasing).
pub fn generate_bracket(hdr: &RadianceMap, evs: &[ExposureValue]) -> Result<ExposureBracket> {
    if evs.is_empty() {
        return Err(Error::invalid("EV list must be non-empty"));
    }
    for pair in evs.windows(2) {
        if pair[1].0 <= pair[0].0 {
            return Err(Error::invalid(format!(
                "EVs must be strictly increasing, got {} then {}",
                pair[0].0, pair[1].0
            )));
        }
    }
    let entries = evs
        .iter()
        .map(|&e| Ok((e, expose(hdr, e)?)))
        .collect::<Result<Vec<_>>>()?;
    ExposureBracket::new(entries)
}

/// `{lo, lo+step, ...}` up to `hi`, inclusive when `(hi - lo)` is an integer
/// multiple of `step` within 1e-9.
pub fn ev_range(lo: f64, hi: f64, step: f64) -> Result<Vec<ExposureValue>> {
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid(format!("step {step} must be positive")));
    }
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::invalid(format!("invalid EV range [{lo}, {hi}]")));
    }
    let q = (hi - lo) / step;
    let n = if (q - q.round()).abs() <= 1e-9 { q.round() } else { q.floor() } as usize;
    (0..=n).map(|i| ExposureValue::new(lo + i as f64 * step)).collect()
}

/// Fraction of pixels fully dark-clipped (all channels 0) and fully
/// highlight-clipped (all channels 255) per exposure, as percentages.
pub fn clipping_stats(bracket: &ExposureBracket) -> ClippingStats {
    let per_ev = bracket
        .entries
        .iter()
        .map(|(ev, img)| {
            let pixels = img.width * img.height;
            let mut dark = 0usize;
            let mut bright = 0usize;
            for px in img.data.chunks_exact(3) {
                if px == [0, 0, 0] {
                    dark += 1;
                } else if px == [255, 255, 255] {
                    bright += 1;
                }
            }
            let pct = 100.0 / pixels as f64;
            (ev.0, dark as f64 * pct, bright as f64 * pct)
        })
        .collect();
    ClippingStats { per_ev }
}
