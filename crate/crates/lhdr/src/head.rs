//! Residual exposure head in latent space.
//!
//! `z_e = z_base + f(z_base, phi(e))`: a U-Net over the base latent whose
//! features are FiLM-modulated at every stage by a conditioning vector
//! derived from a Fourier embedding of the scalar EV. The final convolution
//! starts at zero, so an untrained head is exactly the identity on the
//! latent for every exposure.
//!
//! Layout per encoder stage: stride-2 conv, group norm, FiLM, SiLU. The
//! bottleneck is two pre-activation residual blocks; the decoder mirrors the
//! encoder with nearest-2x upsampling and skip concatenation.
//!
//! The `MultiOutput` variant drops the conditioning entirely and emits the
//! whole bracket as `N * C` channels in one pass (the no-FiLM ablation).

use crate::bracket::{expose, ExposureValue};
use crate::imageio::RadianceMap;
use crate::latent::{encode, sample, Latent};
use crate::neural::{
    concat_bwd, concat_fwd, conv2d_bwd, conv2d_fwd, grad_check, groupnorm_bwd, groupnorm_fwd,
    linear_bwd, linear_fwd, silu_bwd, silu_fwd, upsample_nearest2x_bwd, upsample_nearest2x_fwd,
    AdamConfig, GroupNormCache, ParamStore, Tensor,
};
use crate::rng::{derive_seed, SplitMix64};
use crate::{Error, Result};

/// Width of the canonical EV range [-7, 5]; normalizes embedding phases.
pub const EV_SPAN: f64 = 12.0;
/// Geometric frequency schedule spans this many octaves.
const FREQ_OCTAVES: f64 = 8.0;

/// Conditioning mode of the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadVariant {
    /// FiLM-conditioned on the EV embedding; one exposure per forward pass.
    Film,
    /// Unconditional; predicts all `num_evs` exposure residuals at once.
    MultiOutput { num_evs: usize },
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    /// Latent channels (3 * f^2 for space-to-depth factor f).
    pub channels: usize,
    pub base_width: usize,
    pub stages: usize,
    /// Fourier bands; the embedding has 2 * bands components.
    pub bands: usize,
    pub cond_dim: usize,
    pub groups: usize,
    pub zero_init_final: bool,
    pub film_bottleneck: bool,
    pub variant: HeadVariant,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            channels: 48,
            base_width: 16,
            stages: 3,
            bands: 32,
            cond_dim: 128,
            groups: 4,
            zero_init_final: true,
            film_bottleneck: true,
            variant: HeadVariant::Film,
        }
    }
}

impl HeadConfig {
    /// Gradient-check configuration: every component type present, under
    /// five thousand parameters, nonzero final conv so gradients reach all
    /// layers.
    pub fn tiny() -> Self {
        Self {
            channels: 12,
            base_width: 8,
            stages: 1,
            bands: 4,
            cond_dim: 6,
            groups: 4,
            zero_init_final: false,
            film_bottleneck: true,
            variant: HeadVariant::Film,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_width == 0 || self.stages == 0 {
            return Err(Error::invalid("head dimensions must be nonzero"));
        }
        if self.bands == 0 {
            return Err(Error::invalid("at least one Fourier band required"));
        }
        if self.cond_dim == 0 {
            return Err(Error::invalid("conditioning dimension must be nonzero"));
        }
        if self.base_width % self.groups != 0 {
            return Err(Error::invalid(format!(
                "base width {} not divisible by {} groups",
                self.base_width, self.groups
            )));
        }
        if let HeadVariant::MultiOutput { num_evs } = self.variant {
            if num_evs == 0 {
                return Err(Error::invalid("multi-output head needs at least one EV"));
            }
        }
        Ok(())
    }

    fn stage_width(&self, i: usize) -> usize {
        self.base_width << i
    }

    /// Channels produced by the final convolution.
    pub fn out_channels(&self) -> usize {
        match self.variant {
            HeadVariant::Film => self.channels,
            HeadVariant::MultiOutput { num_evs } => num_evs * self.channels,
        }
    }

    fn uses_film(&self) -> bool {
        matches!(self.variant, HeadVariant::Film)
    }

    /// Space-to-depth factor implied by the channel count.
    pub fn latent_factor(&self) -> Result<usize> {
        let f = ((self.channels / 3) as f64).sqrt().round() as usize;
        if f == 0 || 3 * f * f != self.channels {
            return Err(Error::invalid(format!("channels {} is not 3*f^2", self.channels)));
        }
        Ok(f)
    }
}

/// The no-FiLM ablation: same trunk, no conditioning, `num_evs * C` output
/// channels predicted from the base latent alone.
pub fn ablate_no_film(cfg: &HeadConfig, num_evs: usize) -> HeadConfig {
    HeadConfig { variant: HeadVariant::MultiOutput { num_evs }, ..cfg.clone() }
}

/// Fourier embedding of a scalar EV: `bands` sin/cos pairs at geometrically
/// spaced frequencies (2^0 .. 2^8), phases normalized by the EV span.
pub fn fourier_embed(e: f64, bands: usize) -> Result<Vec<f64>> {
    if bands == 0 {
        return Err(Error::invalid("bands must be >= 1"));
    }
    if !e.is_finite() {
        return Err(Error::invalid("exposure value must be finite"));
    }
    let mut out = Vec::with_capacity(2 * bands);
    for j in 0..bands {
        let exponent = if bands == 1 { 0.0 } else { j as f64 * FREQ_OCTAVES / (bands - 1) as f64 };
        let freq = exponent.exp2();
        let arg = freq * e * std::f64::consts::PI / EV_SPAN;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Per-channel affine modulation: `out[c] = gamma[c] * x[c] + beta[c]`.
pub fn film_modulate(features: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    let (c, h, w) = features.dims3()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!("film params {}x{} vs {c} channels", gamma.len(), beta.len())));
    }
    let spatial = h * w;
    let mut out = features.clone();
    for ch in 0..c {
        let (g, b) = (gamma[ch], beta[ch]);
        for v in &mut out.data[ch * spatial..(ch + 1) * spatial] {
            *v = g * *v + b;
        }
    }
    Ok(out)
}

/// Two-layer conditioning MLP over a Fourier embedding.
pub fn cond_mlp(emb: &Tensor, store: &ParamStore) -> Result<Tensor> {
    let a1 = linear_fwd(emb, store.value("cond.fc1.w"), store.value("cond.fc1.b"))?;
    let h1 = silu_fwd(&a1);
    linear_fwd(&h1, store.value("cond.fc2.w"), store.value("cond.fc2.b"))
}

/// Residual loss: mean over exposures of the summed squared latent error.
pub fn loss_ev(preds: &[Latent], targets: &[Latent]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::invalid(format!(
            "loss needs matching non-empty lists, got {} vs {}",
            preds.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        if p.data.len() != t.data.len() {
            return Err(Error::shape("prediction/target latent shapes differ"));
        }
        total += p.data.iter().zip(&t.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / preds.len() as f64)
}

fn latent_to_tensor(z: &Latent) -> Tensor {
    Tensor::from_vec(&[z.channels, z.height, z.width], z.data.clone()).expect("latent is dense")
}

fn tensor_to_latent(t: &Tensor) -> Latent {
    let (c, h, w) = t.dims3().expect("3-D tensor");
    Latent { channels: c, height: h, width: w, data: t.data.clone() }
}

struct FilmCache {
    /// Effective per-channel scale (1 + projected offset).
    gamma: Vec<f64>,
}

struct BlockCache {
    conv_in: Tensor,
    gn_cache: GroupNormCache,
    gn_out: Tensor,
    film: Option<FilmCache>,
    act_in: Tensor,
}

struct BottleneckCache {
    gn_cache: GroupNormCache,
    gn_out: Tensor,
    film: Option<FilmCache>,
    act_in: Tensor,
    act_out: Tensor,
}

struct DecCache {
    stage: usize,
    up_channels: usize,
    cat: Tensor,
    gn_cache: GroupNormCache,
    gn_out: Tensor,
    film: Option<FilmCache>,
    act_in: Tensor,
}

struct CondCache {
    emb: Tensor,
    a1: Tensor,
    h1: Tensor,
    cond: Tensor,
}

struct Trace {
    cond: Option<CondCache>,
    enc: Vec<BlockCache>,
    bot: Vec<BottleneckCache>,
    dec: Vec<DecCache>,
    out_in: Tensor,
}

fn apply_film(
    store: &ParamStore,
    name: &str,
    cond: &Tensor,
    gn_out: &Tensor,
) -> Result<(Tensor, FilmCache)> {
    let proj = linear_fwd(
        cond,
        store.value(&format!("{name}.film.w")),
        store.value(&format!("{name}.film.b")),
    )?;
    let ch = gn_out.dims3()?.0;
    let gamma: Vec<f64> = proj.data[..ch].iter().map(|g| 1.0 + g).collect();
    let beta = &proj.data[ch..];
    let out = film_modulate(gn_out, &gamma, beta)?;
    Ok((out, FilmCache { gamma }))
}

/// Runs the trunk; returns the predicted residual and backward caches.
fn forward_pass(cfg: &HeadConfig, store: &ParamStore, z: &Tensor, ev: Option<f64>) -> Result<(Tensor, Trace)> {
    let cond_cache = if cfg.uses_film() {
        let e = ev.ok_or_else(|| Error::invalid("FiLM variant needs an exposure value"))?;
        let emb = Tensor::from_vec(&[2 * cfg.bands], fourier_embed(e, cfg.bands)?)?;
        let a1 = linear_fwd(&emb, store.value("cond.fc1.w"), store.value("cond.fc1.b"))?;
        let h1 = silu_fwd(&a1);
        let cond = linear_fwd(&h1, store.value("cond.fc2.w"), store.value("cond.fc2.b"))?;
        Some(CondCache { emb, a1, h1, cond })
    } else {
        None
    };
    let cond = cond_cache.as_ref().map(|c| &c.cond);

    let mut h = z.clone();
    let mut skips: Vec<Tensor> = Vec::with_capacity(cfg.stages);
    let mut enc = Vec::with_capacity(cfg.stages);
    for i in 0..cfg.stages {
        let name = format!("enc{i}");
        skips.push(h.clone());
        let conv_in = h;
        let conv_out = conv2d_fwd(
            &conv_in,
            store.value(&format!("{name}.conv.w")),
            store.value(&format!("{name}.conv.b")),
            2,
        )?;
        let (gn_out, gn_cache) = groupnorm_fwd(
            &conv_out,
            store.value(&format!("{name}.gn.g")),
            store.value(&format!("{name}.gn.b")),
            cfg.groups,
        )?;
        let (act_in, film) = match cond {
            Some(c) => {
                let (t, f) = apply_film(store, &name, c, &gn_out)?;
                (t, Some(f))
            }
            None => (gn_out.clone(), None),
        };
        let act_out = silu_fwd(&act_in);
        enc.push(BlockCache { conv_in, gn_cache, gn_out, film, act_in });
        h = act_out;
    }

    let mut bot = Vec::with_capacity(2);
    for t in 0..2 {
        let name = format!("bot{t}");
        let (gn_out, gn_cache) = groupnorm_fwd(
            &h,
            store.value(&format!("{name}.gn.g")),
            store.value(&format!("{name}.gn.b")),
            cfg.groups,
        )?;
        let (act_in, film) = match cond {
            Some(c) if cfg.film_bottleneck => {
                let (t2, f) = apply_film(store, &name, c, &gn_out)?;
                (t2, Some(f))
            }
            _ => (gn_out.clone(), None),
        };
        let act_out = silu_fwd(&act_in);
        let conv_out = conv2d_fwd(
            &act_out,
            store.value(&format!("{name}.conv.w")),
            store.value(&format!("{name}.conv.b")),
            1,
        )?;
        let next = h.add(&conv_out)?;
        bot.push(BottleneckCache { gn_cache, gn_out, film, act_in, act_out });
        h = next;
    }

    let mut dec = Vec::with_capacity(cfg.stages);
    for i in (0..cfg.stages).rev() {
        let name = format!("dec{i}");
        let up = upsample_nearest2x_fwd(&h)?;
        let up_channels = up.dims3()?.0;
        let cat = concat_fwd(&up, &skips[i])?;
        let conv_out = conv2d_fwd(
            &cat,
            store.value(&format!("{name}.conv.w")),
            store.value(&format!("{name}.conv.b")),
            1,
        )?;
        let (gn_out, gn_cache) = groupnorm_fwd(
            &conv_out,
            store.value(&format!("{name}.gn.g")),
            store.value(&format!("{name}.gn.b")),
            cfg.groups,
        )?;
        let (act_in, film) = match cond {
            Some(c) => {
                let (t2, f) = apply_film(store, &name, c, &gn_out)?;
                (t2, Some(f))
            }
            None => (gn_out.clone(), None),
        };
        let act_out = silu_fwd(&act_in);
        dec.push(DecCache { stage: i, up_channels, cat, gn_cache, gn_out, film, act_in });
        h = act_out;
    }

    let out = conv2d_fwd(&h, store.value("out.conv.w"), store.value("out.conv.b"), 1)?;
    Ok((out, Trace { cond: cond_cache, enc, bot, dec, out_in: h }))
}

/// Backward through a FiLM site; returns the gradient at the GN output and
/// accumulates projection and conditioning gradients.
fn film_bwd(
    store: &mut ParamStore,
    name: &str,
    cache: &FilmCache,
    gn_out: &Tensor,
    dout: &Tensor,
    cond: &Tensor,
    d_cond: &mut Tensor,
) -> Result<Tensor> {
    let (c, h, w) = gn_out.dims3()?;
    let spatial = h * w;
    let mut dx = Tensor::zeros(&[c, h, w]);
    let mut d_proj = Tensor::zeros(&[2 * c]);
    for ch in 0..c {
        let g = cache.gamma[ch];
        let mut dg = 0.0;
        let mut db = 0.0;
        for s in 0..spatial {
            let i = ch * spatial + s;
            let d = dout.data[i];
            dx.data[i] = g * d;
            dg += d * gn_out.data[i];
            db += d;
        }
        d_proj.data[ch] = dg;
        d_proj.data[c + ch] = db;
    }
    let (d_cond_contrib, dw, db) = linear_bwd(cond, store.value(&format!("{name}.film.w")), &d_proj)?;
    store.accumulate_grad(&format!("{name}.film.w"), &dw)?;
    store.accumulate_grad(&format!("{name}.film.b"), &db)?;
    for (a, b) in d_cond.data.iter_mut().zip(&d_cond_contrib.data) {
        *a += b;
    }
    Ok(dx)
}

/// Accumulates parameter gradients for one traced forward pass.
fn backward_pass(cfg: &HeadConfig, store: &mut ParamStore, trace: &Trace, d_residual: &Tensor) -> Result<()> {
    let stages = cfg.stages;
    let mut d_cond = Tensor::zeros(&[cfg.cond_dim]);

    let (mut d_h, dw, db) = conv2d_bwd(&trace.out_in, store.value("out.conv.w"), 1, d_residual)?;
    store.accumulate_grad("out.conv.w", &dw)?;
    store.accumulate_grad("out.conv.b", &db)?;

    let mut d_skips: Vec<Option<Tensor>> = (0..stages).map(|_| None).collect();
    for cache in trace.dec.iter().rev() {
        let name = format!("dec{}", cache.stage);
        let d_act_in = silu_bwd(&cache.act_in, &d_h)?;
        let d_gn_out = match (&cache.film, &trace.cond) {
            (Some(f), Some(cc)) => film_bwd(store, &name, f, &cache.gn_out, &d_act_in, &cc.cond, &mut d_cond)?,
            _ => d_act_in,
        };
        let (d_conv_out, dg, dbeta) =
            groupnorm_bwd(&cache.gn_cache, store.value(&format!("{name}.gn.g")), &d_gn_out)?;
        store.accumulate_grad(&format!("{name}.gn.g"), &dg)?;
        store.accumulate_grad(&format!("{name}.gn.b"), &dbeta)?;
        let (d_cat, dw, db) = conv2d_bwd(&cache.cat, store.value(&format!("{name}.conv.w")), 1, &d_conv_out)?;
        store.accumulate_grad(&format!("{name}.conv.w"), &dw)?;
        store.accumulate_grad(&format!("{name}.conv.b"), &db)?;
        let (d_up, d_skip) = concat_bwd(&d_cat, cache.up_channels)?;
        d_skips[cache.stage] = Some(d_skip);
        d_h = upsample_nearest2x_bwd(&d_up)?;
    }

    for (t, cache) in trace.bot.iter().enumerate().rev() {
        let name = format!("bot{t}");
        let (d_act_out, dw, db) = conv2d_bwd(&cache.act_out, store.value(&format!("{name}.conv.w")), 1, &d_h)?;
        store.accumulate_grad(&format!("{name}.conv.w"), &dw)?;
        store.accumulate_grad(&format!("{name}.conv.b"), &db)?;
        let d_act_in = silu_bwd(&cache.act_in, &d_act_out)?;
        let d_gn_out = match (&cache.film, &trace.cond) {
            (Some(f), Some(cc)) => film_bwd(store, &name, f, &cache.gn_out, &d_act_in, &cc.cond, &mut d_cond)?,
            _ => d_act_in,
        };
        let (d_branch_in, dg, dbeta) =
            groupnorm_bwd(&cache.gn_cache, store.value(&format!("{name}.gn.g")), &d_gn_out)?;
        store.accumulate_grad(&format!("{name}.gn.g"), &dg)?;
        store.accumulate_grad(&format!("{name}.gn.b"), &dbeta)?;
        // Residual block: gradient flows through both the identity and the
        // normalized branch.
        d_h = d_h.add(&d_branch_in)?;
    }

    for (i, cache) in trace.enc.iter().enumerate().rev() {
        let name = format!("enc{i}");
        let d_act_in = silu_bwd(&cache.act_in, &d_h)?;
        let d_gn_out = match (&cache.film, &trace.cond) {
            (Some(f), Some(cc)) => film_bwd(store, &name, f, &cache.gn_out, &d_act_in, &cc.cond, &mut d_cond)?,
            _ => d_act_in,
        };
        let (d_conv_out, dg, dbeta) =
            groupnorm_bwd(&cache.gn_cache, store.value(&format!("{name}.gn.g")), &d_gn_out)?;
        store.accumulate_grad(&format!("{name}.gn.g"), &dg)?;
        store.accumulate_grad(&format!("{name}.gn.b"), &dbeta)?;
        let (mut d_conv_in, dw, db) =
            conv2d_bwd(&cache.conv_in, store.value(&format!("{name}.conv.w")), 2, &d_conv_out)?;
        store.accumulate_grad(&format!("{name}.conv.w"), &dw)?;
        store.accumulate_grad(&format!("{name}.conv.b"), &db)?;
        if let Some(ds) = d_skips[i].take() {
            d_conv_in = d_conv_in.add(&ds)?;
        }
        d_h = d_conv_in;
    }

    if let Some(cc) = &trace.cond {
        let (d_h1, dw2, db2) = linear_bwd(&cc.h1, store.value("cond.fc2.w"), &d_cond)?;
        store.accumulate_grad("cond.fc2.w", &dw2)?;
        store.accumulate_grad("cond.fc2.b", &db2)?;
        let d_a1 = silu_bwd(&cc.a1, &d_h1)?;
        let (_, dw1, db1) = linear_bwd(&cc.emb, store.value("cond.fc1.w"), &d_a1)?;
        store.accumulate_grad("cond.fc1.w", &dw1)?;
        store.accumulate_grad("cond.fc1.b", &db1)?;
    }
    Ok(())
}

/// Exposure head: configuration plus parameter store.
pub struct ExposureHead {
    pub cfg: HeadConfig,
    pub store: ParamStore,
}

const META_NAME: &str = "zz.meta.cfg";
const META_VERSION: f64 = 1.0;

impl ExposureHead {
    /// Builds a head with seeded initialization.
    pub fn new(cfg: HeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();

        fn uniform(rng: &mut SplitMix64, shape: &[usize], fan_in: usize) -> Tensor {
            let s = (1.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.next_range(-s, s)).collect()).unwrap()
        }
        fn register_film(
            store: &mut ParamStore,
            rng: &mut SplitMix64,
            cond_dim: usize,
            name: &str,
            ch: usize,
        ) -> Result<()> {
            store.register(&format!("{name}.film.w"), uniform(rng, &[2 * ch, cond_dim], cond_dim))?;
            store.register(&format!("{name}.film.b"), Tensor::zeros(&[2 * ch]))?;
            Ok(())
        }

        if cfg.uses_film() {
            let emb_dim = 2 * cfg.bands;
            store.register("cond.fc1.w", uniform(&mut rng, &[cfg.cond_dim, emb_dim], emb_dim))?;
            store.register("cond.fc1.b", Tensor::zeros(&[cfg.cond_dim]))?;
            store.register("cond.fc2.w", uniform(&mut rng, &[cfg.cond_dim, cfg.cond_dim], cfg.cond_dim))?;
            store.register("cond.fc2.b", Tensor::zeros(&[cfg.cond_dim]))?;
        }

        let mut in_ch = cfg.channels;
        for i in 0..cfg.stages {
            let w = cfg.stage_width(i);
            let name = format!("enc{i}");
            store.register(&format!("{name}.conv.w"), uniform(&mut rng, &[w, in_ch, 3, 3], in_ch * 9))?;
            store.register(&format!("{name}.conv.b"), Tensor::zeros(&[w]))?;
            store.register(&format!("{name}.gn.g"), Tensor::from_vec(&[w], vec![1.0; w])?)?;
            store.register(&format!("{name}.gn.b"), Tensor::zeros(&[w]))?;
            if cfg.uses_film() {
                register_film(&mut store, &mut rng, cfg.cond_dim, &name, w)?;
            }
            in_ch = w;
        }

        let wl = cfg.stage_width(cfg.stages - 1);
        for t in 0..2 {
            let name = format!("bot{t}");
            store.register(&format!("{name}.gn.g"), Tensor::from_vec(&[wl], vec![1.0; wl])?)?;
            store.register(&format!("{name}.gn.b"), Tensor::zeros(&[wl]))?;
            if cfg.uses_film() && cfg.film_bottleneck {
                register_film(&mut store, &mut rng, cfg.cond_dim, &name, wl)?;
            }
            store.register(&format!("{name}.conv.w"), uniform(&mut rng, &[wl, wl, 3, 3], wl * 9))?;
            store.register(&format!("{name}.conv.b"), Tensor::zeros(&[wl]))?;
        }

        for i in (0..cfg.stages).rev() {
            let cur = if i == cfg.stages - 1 { wl } else { cfg.stage_width(i) };
            let skip_ch = if i == 0 { cfg.channels } else { cfg.stage_width(i - 1) };
            let target = if i == 0 { cfg.base_width } else { cfg.stage_width(i - 1) };
            let cat_ch = cur + skip_ch;
            let name = format!("dec{i}");
            store.register(&format!("{name}.conv.w"), uniform(&mut rng, &[target, cat_ch, 3, 3], cat_ch * 9))?;
            store.register(&format!("{name}.conv.b"), Tensor::zeros(&[target]))?;
            store.register(&format!("{name}.gn.g"), Tensor::from_vec(&[target], vec![1.0; target])?)?;
            store.register(&format!("{name}.gn.b"), Tensor::zeros(&[target]))?;
            if cfg.uses_film() {
                register_film(&mut store, &mut rng, cfg.cond_dim, &name, target)?;
            }
        }

        let out_ch = cfg.out_channels();
        let out_w = if cfg.zero_init_final {
            Tensor::zeros(&[out_ch, cfg.base_width, 3, 3])
        } else {
            uniform(&mut rng, &[out_ch, cfg.base_width, 3, 3], cfg.base_width * 9)
        };
        store.register("out.conv.w", out_w)?;
        store.register("out.conv.b", Tensor::zeros(&[out_ch]))?;

        Ok(Self { cfg, store })
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    fn check_latent(&self, z: &Latent) -> Result<()> {
        if z.channels != self.cfg.channels {
            return Err(Error::shape(format!(
                "latent has {} channels, head expects {}",
                z.channels, self.cfg.channels
            )));
        }
        let div = 1usize << self.cfg.stages;
        if z.height % div != 0 || z.width % div != 0 {
            return Err(Error::shape(format!(
                "latent {}x{} not divisible by 2^{}",
                z.height, z.width, self.cfg.stages
            )));
        }
        Ok(())
    }

    /// `z + f(z, phi(e))` for the FiLM variant.
    pub fn forward(&self, z: &Latent, e: f64) -> Result<Latent> {
        if self.cfg.variant != HeadVariant::Film {
            return Err(Error::invalid("forward() requires the FiLM variant"));
        }
        self.check_latent(z)?;
        let zt = latent_to_tensor(z);
        let (residual, _) = forward_pass(&self.cfg, &self.store, &zt, Some(e))?;
        let out = zt.add(&residual)?;
        Ok(tensor_to_latent(&out))
    }

    /// All `num_evs` exposure latents in one pass (no-FiLM variant),
    /// ordered as the EV grid the head was trained on.
    pub fn forward_stack(&self, z: &Latent) -> Result<Vec<Latent>> {
        let num_evs = match self.cfg.variant {
            HeadVariant::MultiOutput { num_evs } => num_evs,
            HeadVariant::Film => {
                return Err(Error::invalid("forward_stack() requires the multi-output variant"))
            }
        };
        self.check_latent(z)?;
        let zt = latent_to_tensor(z);
        let (residual, _) = forward_pass(&self.cfg, &self.store, &zt, None)?;
        let (c, h, w) = (self.cfg.channels, z.height, z.width);
        let plane = c * h * w;
        let mut out = Vec::with_capacity(num_evs);
        for i in 0..num_evs {
            let mut data = zt.data.clone();
            for (dst, src) in data.iter_mut().zip(&residual.data[i * plane..(i + 1) * plane]) {
                *dst += src;
            }
            out.push(Latent { channels: c, height: h, width: w, data });
        }
        Ok(out)
    }

    /// Serializes weights plus a config descriptor tensor.
    pub fn save_bytes(&self) -> Vec<u8> {
        let (variant, num_evs) = match self.cfg.variant {
            HeadVariant::Film => (0.0, 0.0),
            HeadVariant::MultiOutput { num_evs } => (1.0, num_evs as f64),
        };
        let meta = vec![
            META_VERSION,
            self.cfg.channels as f64,
            self.cfg.base_width as f64,
            self.cfg.stages as f64,
            self.cfg.bands as f64,
            self.cfg.cond_dim as f64,
            self.cfg.groups as f64,
            if self.cfg.zero_init_final { 1.0 } else { 0.0 },
            if self.cfg.film_bottleneck { 1.0 } else { 0.0 },
            variant,
            num_evs,
        ];
        let meta_t = Tensor::from_vec(&[meta.len()], meta).unwrap();
        self.store.save_bytes_with(&[(META_NAME.to_string(), meta_t)])
    }

    /// Restores a head (config and weights) from [`Self::save_bytes`] output.
    pub fn load_bytes(bytes: &[u8]) -> Result<Self> {
        let mut store = ParamStore::load_bytes(bytes)?;
        let meta = store
            .take(META_NAME)
            .ok_or_else(|| Error::format("weights", "missing config descriptor"))?;
        let m = &meta.data;
        if m.len() != 11 || m[0] != META_VERSION {
            return Err(Error::format("weights", "unsupported config descriptor"));
        }
        let variant = if m[9] == 0.0 {
            HeadVariant::Film
        } else {
            HeadVariant::MultiOutput { num_evs: m[10] as usize }
        };
        let cfg = HeadConfig {
            channels: m[1] as usize,
            base_width: m[2] as usize,
            stages: m[3] as usize,
            bands: m[4] as usize,
            cond_dim: m[5] as usize,
            groups: m[6] as usize,
            zero_init_final: m[7] != 0.0,
            film_bottleneck: m[8] != 0.0,
            variant,
        };
        cfg.validate()?;
        Ok(Self { cfg, store })
    }
}

/// Anything that maps a base latent to an exposure-specific latent.
pub trait ExposureMapper {
    fn map_exposure(&self, z_base: &Latent, ev: f64) -> Result<Latent>;
}

impl ExposureMapper for ExposureHead {
    fn map_exposure(&self, z_base: &Latent, ev: f64) -> Result<Latent> {
        self.forward(z_base, ev)
    }
}

impl<F> ExposureMapper for F
where
    F: Fn(&Latent, f64) -> Result<Latent>,
{
    fn map_exposure(&self, z_base: &Latent, ev: f64) -> Result<Latent> {
        self(z_base, ev)
    }
}

/// Adapter exposing a multi-output head as a per-EV mapper over its grid.
pub struct StackMapper<'a> {
    pub head: &'a ExposureHead,
    pub evs: Vec<f64>,
}

impl ExposureMapper for StackMapper<'_> {
    fn map_exposure(&self, z_base: &Latent, ev: f64) -> Result<Latent> {
        let idx = self
            .evs
            .iter()
            .position(|&e| (e - ev).abs() < 1e-9)
            .ok_or_else(|| Error::invalid(format!("EV {ev} not on the trained grid")))?;
        let stack = self.head.forward_stack(z_base)?;
        Ok(stack.into_iter().nth(idx).expect("index checked"))
    }
}

/// Training options.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    pub steps: usize,
    pub seed: u64,
    /// Supervise on sampled latents instead of posterior means.
    pub sampled_z: bool,
    /// Posterior std used when `sampled_z` is set.
    pub sigma0: f64,
    /// FiLM variant only: evaluate the loss over the whole bracket per step
    /// instead of one sampled (scene, EV) pair.
    pub full_bracket: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            steps: 5000,
            seed: 1,
            sampled_z: false,
            sigma0: 1e-4,
            full_bracket: false,
        }
    }
}

/// Loss trace plus the trained head.
pub struct TrainResult {
    pub head: ExposureHead,
    pub trace: Vec<f64>,
}

/// Precomputed supervision: per scene, the base latent and per-EV targets.
struct SceneTargets {
    z_base: Latent,
    targets: Vec<Latent>,
}

fn build_targets(
    corpus: &[RadianceMap],
    evs: &[ExposureValue],
    factor: usize,
    opts: &TrainOptions,
) -> Result<Vec<SceneTargets>> {
    let base_idx = evs
        .iter()
        .position(|e| e.0 == 0.0)
        .ok_or_else(|| Error::invalid("training bracket must contain EV = 0"))?;
    corpus
        .iter()
        .enumerate()
        .map(|(s, scene)| {
            let targets = evs
                .iter()
                .enumerate()
                .map(|(j, &e)| {
                    let img = expose(scene, e)?;
                    let sigma0 = if opts.sampled_z { opts.sigma0 } else { 0.0 };
                    let post = encode(&img, factor, sigma0)?;
                    Ok(if opts.sampled_z {
                        sample(&post, derive_seed(opts.seed, (s * evs.len() + j) as u64))
                    } else {
                        post.mu
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SceneTargets { z_base: targets[base_idx].clone(), targets })
        })
        .collect()
}

/// Trains an exposure head on procedural scenes.
///
/// Per step (FiLM variant): one seeded-shuffle (scene, EV) pair, squared
/// latent error, backward, Adam. The multi-output variant consumes one scene
/// per step and fits the whole stack. The full loss trace is returned and
/// identical inputs produce bitwise-identical weights.
pub fn train(
    corpus: &[RadianceMap],
    evs: &[ExposureValue],
    cfg: &HeadConfig,
    opts: &TrainOptions,
) -> Result<TrainResult> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if let HeadVariant::MultiOutput { num_evs } = cfg.variant {
        if num_evs != evs.len() {
            return Err(Error::invalid(format!(
                "multi-output head built for {num_evs} EVs, got {}",
                evs.len()
            )));
        }
    }
    let factor = cfg.latent_factor()?;
    let scenes = build_targets(corpus, evs, factor, opts)?;
    let mut head = ExposureHead::new(cfg.clone(), opts.seed)?;
    let mut rng = SplitMix64::new(derive_seed(opts.seed, 0xC0FFEE));
    let mut trace = Vec::with_capacity(opts.steps);

    // Work items: (scene, ev) pairs for per-EV training, scene indices for
    // whole-stack modes.
    let per_pair = cfg.uses_film() && !opts.full_bracket;
    let mut order: Vec<(usize, usize)> = if per_pair {
        (0..scenes.len()).flat_map(|s| (0..evs.len()).map(move |j| (s, j))).collect()
    } else {
        (0..scenes.len()).map(|s| (s, 0)).collect()
    };

    let mut cursor = order.len(); // force a shuffle on the first step
    for step in 0..opts.steps {
        if cursor >= order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let (s, j) = order[cursor];
        cursor += 1;
        let scene = &scenes[s];
        let zt = latent_to_tensor(&scene.z_base);

        let loss = match cfg.variant {
            HeadVariant::Film if per_pair => {
                let e = evs[j].0;
                let (residual, fwd) = forward_pass(cfg, &head.store, &zt, Some(e))?;
                let target = &scene.targets[j];
                let mut loss = 0.0;
                let mut d_res = Tensor::zeros(residual.shape());
                for i in 0..residual.data.len() {
                    let diff = zt.data[i] + residual.data[i] - target.data[i];
                    loss += diff * diff;
                    d_res.data[i] = 2.0 * diff;
                }
                backward_pass(cfg, &mut head.store, &fwd, &d_res)?;
                loss
            }
            HeadVariant::Film => {
                // Full-bracket step: mean over the N exposures.
                let n = evs.len() as f64;
                let mut loss = 0.0;
                for (j, e) in evs.iter().enumerate() {
                    let (residual, fwd) = forward_pass(cfg, &head.store, &zt, Some(e.0))?;
                    let target = &scene.targets[j];
                    let mut d_res = Tensor::zeros(residual.shape());
                    for i in 0..residual.data.len() {
                        let diff = zt.data[i] + residual.data[i] - target.data[i];
                        loss += diff * diff / n;
                        d_res.data[i] = 2.0 * diff / n;
                    }
                    backward_pass(cfg, &mut head.store, &fwd, &d_res)?;
                }
                loss
            }
            HeadVariant::MultiOutput { num_evs } => {
                let (residual, fwd) = forward_pass(cfg, &head.store, &zt, None)?;
                let plane = zt.data.len();
                let n = num_evs as f64;
                let mut loss = 0.0;
                let mut d_res = Tensor::zeros(residual.shape());
                for (j, target) in scene.targets.iter().enumerate() {
                    for i in 0..plane {
                        let diff = zt.data[i] + residual.data[j * plane + i] - target.data[i];
                        loss += diff * diff / n;
                        d_res.data[j * plane + i] = 2.0 * diff / n;
                    }
                }
                backward_pass(cfg, &mut head.store, &fwd, &d_res)?;
                loss
            }
        };

        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss} at step {step}")));
        }
        head.store.adam_step(&opts.adam);
        trace.push(loss);
    }

    Ok(TrainResult { head, trace })
}

/// Full-model finite-difference check on the tiny head.
///
/// Returns (max relative error, parameter count).
pub fn head_grad_check(seed: u64) -> Result<(f64, usize)> {
    let cfg = HeadConfig::tiny();
    let factor = cfg.latent_factor()?; // 2 for the tiny 12-channel config
    let side = 16 * factor;
    let mut rng = SplitMix64::new(derive_seed(seed, 7));
    let img = crate::imageio::LdrImage::new(
        side,
        side,
        (0..side * side * 3).map(|_| (rng.next_u64() & 0xff) as u8).collect(),
    )?;
    let z = encode(&img, factor, 0.0)?.mu;
    let zt = latent_to_tensor(&z);
    // Synthetic target so the loss has structure.
    let target: Vec<f64> = zt.data.iter().map(|v| v * 0.7 + 0.05).collect();
    let e = 2.5;

    let mut head = ExposureHead::new(cfg.clone(), seed)?;
    let params = head.param_count();

    let cfg_f = cfg.clone();
    let zt_f = zt.clone();
    let target_f = target.clone();
    let forward = move |store: &ParamStore| -> Result<f64> {
        let (residual, _) = forward_pass(&cfg_f, store, &zt_f, Some(e))?;
        let loss = residual
            .data
            .iter()
            .zip(&zt_f.data)
            .zip(&target_f)
            .map(|((r, z0), t)| {
                let diff = z0 + r - t;
                diff * diff
            })
            .sum();
        Ok(loss)
    };
    let backward = move |store: &mut ParamStore| -> Result<f64> {
        let (residual, fwd) = forward_pass(&cfg, store, &zt, Some(e))?;
        let mut loss = 0.0;
        let mut d_res = Tensor::zeros(residual.shape());
        for i in 0..residual.data.len() {
            let diff = zt.data[i] + residual.data[i] - target[i];
            loss += diff * diff;
            d_res.data[i] = 2.0 * diff;
        }
        backward_pass(&cfg, store, &fwd, &d_res)?;
        Ok(loss)
    };
    let err = grad_check(&mut head.store, forward, backward, 1e-4)?;
    Ok((err, params))
}
