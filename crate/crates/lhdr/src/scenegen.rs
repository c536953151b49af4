//! Deterministic procedural HDR scenes.
//!
//! Each scene is an exponentiated value-noise field (3 octaves of a
//! bilinear-interpolated lattice seeded from SplitMix64) plus optional
//! Gaussian radial light blobs. The log-domain span of the result is pinned
//! to `dr_target` stops, with light peaks reaching
//! `base_level * 2^(dr_target - 1)` and a radiance floor of
//! `base_level * 2^(-dr_target / 2)` so every sample stays strictly positive
//! and every logarithm downstream stays finite.

use rayon::prelude::*;

use crate::imageio::RadianceMap;
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Parameters of one procedural scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub num_lights: u32,
    /// Desired log2 span of radiance, in stops.
    pub dr_target: f64,
    /// Linear radiance at the geometric center of the scene's range.
    pub base_level: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { width: 64, height: 64, seed: 1, num_lights: 0, dr_target: 10.0, base_level: 1.0 }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::invalid("scene dimensions must be at least 8x8"));
        }
        if !(1.0..=20.0).contains(&self.dr_target) {
            return Err(Error::invalid(format!("dr_target {} outside [1, 20]", self.dr_target)));
        }
        if !(self.base_level > 0.0 && self.base_level.is_finite()) {
            return Err(Error::invalid("base_level must be positive and finite"));
        }
        let floor = self.base_level * (-self.dr_target / 2.0).exp2();
        let peak = self.base_level * (self.dr_target - 1.0).exp2();
        if (floor as f32) < f32::MIN_POSITIVE || !(peak as f32).is_finite() {
            return Err(Error::invalid("radiance range not representable in f32"));
        }
        Ok(())
    }
}

/// Octave lattice sizes: 4, 8, 16 cells across, amplitudes 1, 1/2, 1/4.
const OCTAVES: usize = 3;
const BASE_CELLS: usize = 4;

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// 3-octave value noise in [0, 1), evaluated over the full pixel grid.
///
/// All lattice values are drawn from `rng` in a fixed order (octave-major,
/// row-major) so the field is a pure function of the seed.
fn value_noise_field(rng: &mut SplitMix64, width: usize, height: usize) -> Vec<f64> {
    let mut field = vec![0.0f64; width * height];
    let mut amplitude = 1.0;
    for octave in 0..OCTAVES {
        let cells = BASE_CELLS << octave;
        let stride = cells + 1;
        let lattice: Vec<f64> = (0..stride * stride).map(|_| rng.next_f64()).collect();
        for y in 0..height {
            let fy = y as f64 / height as f64 * cells as f64;
            let y0 = fy as usize;
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = x as f64 / width as f64 * cells as f64;
                let x0 = fx as usize;
                let tx = fx - x0 as f64;
                let v00 = lattice[y0 * stride + x0];
                let v10 = lattice[y0 * stride + x0 + 1];
                let v01 = lattice[(y0 + 1) * stride + x0];
                let v11 = lattice[(y0 + 1) * stride + x0 + 1];
                let v = lerp(lerp(v00, v10, tx), lerp(v01, v11, tx), ty);
                field[y * width + x] += amplitude * v;
            }
        }
        amplitude *= 0.5;
    }
    // Min-max normalize so the field spans exactly [0, 1].
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &field {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    for v in &mut field {
        *v = (*v - lo) / span;
    }
    field
}

struct Light {
    cx: f64,
    cy: f64,
    sigma: f64,
}

/// Generates one scene. Bitwise deterministic in the spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<RadianceMap> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = SplitMix64::new(spec.seed);
    let noise = value_noise_field(&mut rng, w, h);

    let min_dim = w.min(h) as f64;
    let lights: Vec<Light> = (0..spec.num_lights)
        .map(|_| Light {
            cx: rng.next_range(0.0, w as f64),
            cy: rng.next_range(0.0, h as f64),
            sigma: rng.next_range(min_dim / 16.0, min_dim / 6.0),
        })
        .collect();

    let dr = spec.dr_target;
    let base = spec.base_level;
    let floor = base * (-dr / 2.0).exp2();

    let data: Vec<f32> = if lights.is_empty() {
        // Pure noise base: span exactly dr stops, centered on base_level.
        noise
            .iter()
            .flat_map(|&n| {
                let v = (base * (dr * (n - 0.5)).exp2()).max(floor) as f32;
                [v, v, v]
            })
            .collect()
    } else {
        // Noise plus additive Gaussian blobs peaking at base * 2^(dr-1),
        // then a log-domain renormalization that pins the span to dr stops
        // with the blob peaks at the top of the range.
        let peak = base * (dr - 1.0).exp2();
        let mut lin = vec![0.0f64; w * h];
        for y in 0..h {
            for x in 0..w {
                let n = noise[y * w + x];
                let mut v = base * (dr / 2.0 * (n - 0.5)).exp2();
                for light in &lights {
                    let dx = x as f64 - light.cx;
                    let dy = y as f64 - light.cy;
                    v += peak * (-(dx * dx + dy * dy) / (2.0 * light.sigma * light.sigma)).exp();
                }
                lin[y * w + x] = v;
            }
        }
        let (mut glo, mut ghi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in &lin {
            let g = v.ln();
            glo = glo.min(g);
            ghi = ghi.max(g);
        }
        let gspan = (ghi - glo).max(f64::MIN_POSITIVE);
        lin.iter()
            .flat_map(|&v| {
                let t = (v.ln() - glo) / gspan;
                let out = (base * (t * dr - 1.0).exp2()).max(floor) as f32;
                [out, out, out]
            })
            .collect()
    };

    RadianceMap::new(w, h, data)
}

/// Generates `count` scenes; scene `i` uses seed `base_seed + i` for
/// `i` in `1..=count`.
pub fn corpus_specs(count: usize, base_seed: u64, template: &SceneSpec) -> Vec<SceneSpec> {
    (1..=count as u64)
        .map(|i| SceneSpec { seed: base_seed.wrapping_add(i), ..template.clone() })
        .collect()
}

pub fn generate_corpus(count: usize, base_seed: u64, template: &SceneSpec) -> Result<Vec<RadianceMap>> {
    if count < 1 {
        return Err(Error::invalid("corpus count must be at least 1"));
    }
    corpus_specs(count, base_seed, template)
        .par_iter()
        .map(generate_scene)
        .collect()
}

/// Measured log2(max/min) of a map, in stops.
pub fn measured_span_stops(map: &RadianceMap) -> f64 {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in &map.data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (hi as f64 / lo as f64).log2()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_generation() {
        let spec = SceneSpec { seed: 99, num_lights: 2, ..SceneSpec::default() };
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn span_matches_target() {
        for (seed, lights) in [(1u64, 0u32), (2, 1), (3, 4)] {
            let spec = SceneSpec { seed, num_lights: lights, dr_target: 10.0, ..SceneSpec::default() };
            let map = generate_scene(&spec).unwrap();
            let span = measured_span_stops(&map);
            assert!((9.5..=10.5).contains(&span), "span {span} for lights={lights}");
        }
    }

    #[test]
    fn no_lights_equals_regenerated_base_field() {
        let spec = SceneSpec { seed: 5, num_lights: 0, dr_target: 8.0, ..SceneSpec::default() };
        let map = generate_scene(&spec).unwrap();

        // Rebuild the exponentiated noise field directly.
        let mut rng = SplitMix64::new(spec.seed);
        let noise = value_noise_field(&mut rng, spec.width, spec.height);
        let floor = spec.base_level * (-spec.dr_target / 2.0).exp2();
        for (i, &n) in noise.iter().enumerate() {
            let expect = (spec.base_level * (spec.dr_target * (n - 0.5)).exp2()).max(floor) as f32;
            assert_eq!(map.data[i * 3], expect);
        }
        let span = measured_span_stops(&map);
        assert!((span - 8.0).abs() < 0.01, "noise-only span {span}");
    }

    #[test]
    fn strictly_positive_everywhere() {
        let spec = SceneSpec { seed: 77, num_lights: 3, dr_target: 14.0, ..SceneSpec::default() };
        let map = generate_scene(&spec).unwrap();
        let floor = (spec.base_level * (-spec.dr_target / 2.0).exp2()) as f32;
        assert!(map.data.iter().all(|&v| v >= floor && v > 0.0));
    }

    #[test]
    fn light_peak_reaches_top_of_range() {
        let spec = SceneSpec { seed: 21, num_lights: 1, dr_target: 12.0, ..SceneSpec::default() };
        let map = generate_scene(&spec).unwrap();
        let max = map.data.iter().cloned().fold(f32::MIN, f32::max);
        let expected = (spec.base_level * (spec.dr_target - 1.0).exp2()) as f32;
        assert!((max / expected - 1.0).abs() < 1e-5, "max {max} vs peak {expected}");
    }

    #[test]
    fn corpus_seed_indexing() {
        let template = SceneSpec { width: 16, height: 16, ..SceneSpec::default() };
        let corpus = generate_corpus(3, 1, &template).unwrap();
        for (i, scene) in corpus.iter().enumerate() {
            let expect =
                generate_scene(&SceneSpec { seed: 1 + (i as u64 + 1), ..template.clone() }).unwrap();
            assert_eq!(scene.data, expect.data, "scene {i} should use seed {}", 2 + i);
        }
        assert_ne!(corpus[0].data, corpus[1].data);
        assert_ne!(corpus[1].data, corpus[2].data);
    }

    #[test]
    fn corpus_regeneration_is_bitwise_stable() {
        let template = SceneSpec { width: 16, height: 16, num_lights: 1, ..SceneSpec::default() };
        let a = generate_corpus(4, 10, &template).unwrap();
        let b = generate_corpus(4, 10, &template).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn corpus_of_300_supported() {
        let template = SceneSpec { width: 8, height: 8, ..SceneSpec::default() };
        let corpus = generate_corpus(300, 0, &template).unwrap();
        assert_eq!(corpus.len(), 300);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_scene(&SceneSpec { width: 4, ..SceneSpec::default() }).is_err());
        assert!(generate_scene(&SceneSpec { dr_target: 0.5, ..SceneSpec::default() }).is_err());
        assert!(generate_scene(&SceneSpec { dr_target: 25.0, ..SceneSpec::default() }).is_err());
        assert!(generate_scene(&SceneSpec { base_level: 0.0, ..SceneSpec::default() }).is_err());
    }
}
