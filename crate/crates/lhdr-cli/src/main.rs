//! `lhdr`: procedural scenes, exposure brackets, log-domain HDR merging,
//! exposure-head training, and evaluation, as one executable.
//!
//! Every subcommand prints its effective configuration before doing any
//! work, so a run can be reproduced from its own output. Reports are
//! line-oriented with a `#` header row.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lhdr::bracket::{clipping_stats, ev_range, expose, generate_bracket, ExposureBracket, ExposureValue};
use lhdr::head::{
    ablate_no_film, head_grad_check, train, ExposureHead, HeadConfig, HeadVariant, StackMapper,
    TrainOptions,
};
use lhdr::imageio::{read_pfm, read_ppm, write_pfm, write_ppm, LdrImage, RadianceMap};
use lhdr::latent::{encode, posterior_stats};
use lhdr::merge::{blend_with_input, merge_bracket, MergeConfig, WeightMode};
use lhdr::metrics::{dynamic_range_stops, eval_l2h, latent_trajectory, reconstruct_l2h};
use lhdr::neural::AdamConfig;
use lhdr::scenegen::{corpus_specs, generate_scene, SceneSpec};

#[derive(Parser)]
#[command(name = "lhdr", version, about = "Exposure stacks, HDR merging, and a latent exposure head")]
struct Cli {
    /// Worker thread cap (0 = library default). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural HDR scenes as PFM files plus a manifest.
    GenScenes(GenScenesArgs),
    /// Render an LDR exposure stack from an HDR scene.
    Bracket(BracketArgs),
    /// Per-EV clipping statistics of a rendered bracket.
    Stats(StatsArgs),
    /// Merge a bracket into an HDR radiance map.
    Merge(MergeArgs),
    /// Posterior statistics of the latent backend.
    PosteriorStats(PosteriorStatsArgs),
    /// Train the exposure head on a scene directory.
    Train(TrainArgs),
    /// Finite-difference check of the full tiny head.
    Gradcheck(GradcheckArgs),
    /// Image-to-HDR reconstruction through the trained head.
    L2h(L2hArgs),
    /// Dynamic range of a radiance map, in stops.
    Stops(StopsArgs),
    /// Latent exposure-trajectory report for a trained head.
    Trajectory(TrajectoryArgs),
    /// Evaluate a trained head against ground-truth scenes.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenScenesArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 1)]
    num_lights: u32,
    #[arg(long, default_value_t = 10.0)]
    dr_target: f64,
    #[arg(long, default_value_t = 1.0)]
    base_level: f64,
}

#[derive(Args)]
struct BracketArgs {
    #[arg(long)]
    input: PathBuf,
    /// EV grid as lo:hi:step.
    #[arg(long, default_value = "-7:5:1", allow_hyphen_values = true)]
    evs: String,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    bracket_dir: PathBuf,
}

#[derive(Args)]
struct MergeTaus {
    #[arg(long, default_value_t = 0.05)]
    tau_black: f64,
    #[arg(long, default_value_t = 0.95)]
    tau_white: f64,
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    /// Weight channels independently instead of per pixel.
    #[arg(long, default_value_t = false)]
    per_channel_weights: bool,
}

impl MergeTaus {
    fn config(&self) -> MergeConfig {
        MergeConfig {
            tau_black: self.tau_black,
            tau_white: self.tau_white,
            eps: self.eps,
            weight_mode: if self.per_channel_weights { WeightMode::PerChannel } else { WeightMode::PerPixel },
            ..MergeConfig::default()
        }
    }
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    bracket_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Blend the merge with this LDR input (soft saturation mask).
    #[arg(long)]
    blend: Option<PathBuf>,
    #[command(flatten)]
    taus: MergeTaus,
}

#[derive(Args)]
struct PosteriorStatsArgs {
    /// Directory of .ppm images.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    factor: usize,
    #[arg(long, default_value_t = 1e-4)]
    sigma0: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of .pfm training scenes.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "-7:5:1", allow_hyphen_values = true)]
    evs: String,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long)]
    out: PathBuf,
    /// Train the unconditional multi-output ablation.
    #[arg(long, default_value_t = false)]
    no_film: bool,
    /// Supervise on sampled latents instead of posterior means.
    #[arg(long, default_value_t = false)]
    sampled_z: bool,
    /// Evaluate the loss over the whole bracket each step.
    #[arg(long, default_value_t = false)]
    full_bracket: bool,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    stages: usize,
    #[arg(long, default_value_t = 32)]
    bands: usize,
    #[arg(long, default_value_t = 128)]
    cond_dim: usize,
    #[arg(long, default_value_t = 4)]
    factor: usize,
    #[arg(long, default_value_t = 1e-4)]
    sigma0: f64,
    /// Write the (step, loss) trace here instead of stdout.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct L2hArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Blend the reconstruction with the input image.
    #[arg(long, default_value_t = false)]
    blend: bool,
    #[arg(long, default_value = "-7:5:1", allow_hyphen_values = true)]
    evs: String,
    #[command(flatten)]
    taus: MergeTaus,
}

#[derive(Args)]
struct StopsArgs {
    #[arg(long)]
    input: PathBuf,
    /// Percentile pair as lo,hi.
    #[arg(long, default_value = "0.1,99.9")]
    pct: String,
}

#[derive(Args)]
struct TrajectoryArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "-7:5:1", allow_hyphen_values = true)]
    evs: String,
    #[arg(long)]
    out: PathBuf,
    /// Optional ground-truth HDR scene for the reference trajectory.
    #[arg(long)]
    hdr: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of ground-truth .pfm scenes.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = false)]
    blend: bool,
    #[arg(long, default_value = "-7:5:1", allow_hyphen_values = true)]
    evs: String,
    #[command(flatten)]
    taus: MergeTaus,
}

fn main() {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Parallelism is map-style only, so results are thread-count
        // invariant; this just caps the workers.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn parse_ev_spec(spec: &str) -> Result<Vec<ExposureValue>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        bail!("EV spec must be lo:hi:step, got {spec:?}");
    }
    let lo: f64 = parts[0].parse().context("bad lo in EV spec")?;
    let hi: f64 = parts[1].parse().context("bad hi in EV spec")?;
    let step: f64 = parts[2].parse().context("bad step in EV spec")?;
    Ok(ev_range(lo, hi, step)?)
}

/// File label for one EV: one decimal where that is exact, more otherwise.
fn format_ev(ev: f64) -> String {
    if (ev * 10.0).round() / 10.0 == ev {
        format!("{ev:+.1}")
    } else {
        format!("{ev:+}")
    }
}

fn read_pfm_file(path: &Path) -> Result<RadianceMap> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(read_pfm(&bytes).with_context(|| format!("decoding {}", path.display()))?)
}

fn read_ppm_file(path: &Path) -> Result<LdrImage> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(read_ppm(&bytes).with_context(|| format!("decoding {}", path.display()))?)
}

/// Sorted listing of files with one extension, for deterministic corpora.
fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == ext).unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .{ext} files in {}", dir.display());
    }
    Ok(files)
}

/// Reads a bracket directory via its manifest (`file ev` rows).
fn read_bracket_dir(dir: &Path) -> Result<ExposureBracket> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))
        .with_context(|| format!("reading {}/manifest.txt", dir.display()))?;
    let mut entries = Vec::new();
    for line in manifest.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split_whitespace();
        let file = cols.next().ok_or_else(|| anyhow!("manifest row missing file column"))?;
        let ev: f64 = cols
            .next()
            .ok_or_else(|| anyhow!("manifest row missing ev column"))?
            .parse()
            .context("bad ev in manifest")?;
        entries.push((ExposureValue::new(ev)?, read_ppm_file(&dir.join(file))?));
    }
    Ok(ExposureBracket::new(entries)?)
}

fn load_head(path: &Path) -> Result<ExposureHead> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ExposureHead::load_bytes(&bytes)?)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenScenes(a) => gen_scenes(a),
        Command::Bracket(a) => bracket_cmd(a),
        Command::Stats(a) => stats_cmd(a),
        Command::Merge(a) => merge_cmd(a),
        Command::PosteriorStats(a) => posterior_stats_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::L2h(a) => l2h_cmd(a),
        Command::Stops(a) => stops_cmd(a),
        Command::Trajectory(a) => trajectory_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    }
}

fn gen_scenes(a: GenScenesArgs) -> Result<()> {
    println!(
        "config: cmd=gen-scenes out_dir={} count={} base_seed={} width={} height={} num_lights={} dr_target={} base_level={}",
        a.out_dir.display(), a.count, a.base_seed, a.width, a.height, a.num_lights, a.dr_target, a.base_level
    );
    fs::create_dir_all(&a.out_dir)?;
    let template = SceneSpec {
        width: a.width,
        height: a.height,
        seed: 0,
        num_lights: a.num_lights,
        dr_target: a.dr_target,
        base_level: a.base_level,
    };
    let specs = corpus_specs(a.count, a.base_seed, &template);
    let mut manifest = String::from("# file seed width height num_lights dr_target base_level\n");
    for (i, spec) in specs.iter().enumerate() {
        let scene = generate_scene(spec)?;
        let name = format!("scene_{:04}.pfm", i + 1);
        fs::write(a.out_dir.join(&name), write_pfm(&scene)?)?;
        writeln!(
            manifest,
            "{name} {} {} {} {} {} {}",
            spec.seed, spec.width, spec.height, spec.num_lights, spec.dr_target, spec.base_level
        )?;
    }
    fs::write(a.out_dir.join("manifest.txt"), manifest)?;
    println!("wrote {} scenes to {}", a.count, a.out_dir.display());
    Ok(())
}

fn bracket_cmd(a: BracketArgs) -> Result<()> {
    println!("config: cmd=bracket input={} evs={} out_dir={}", a.input.display(), a.evs, a.out_dir.display());
    let hdr = read_pfm_file(&a.input)?;
    let evs = parse_ev_spec(&a.evs)?;
    let bracket = generate_bracket(&hdr, &evs)?;
    fs::create_dir_all(&a.out_dir)?;
    let mut manifest = String::from("# file ev\n");
    for (ev, img) in bracket.entries() {
        let name = format!("ev{}.ppm", format_ev(ev.0));
        fs::write(a.out_dir.join(&name), write_ppm(img)?)?;
        writeln!(manifest, "{name} {}", ev.0)?;
    }
    fs::write(a.out_dir.join("manifest.txt"), manifest)?;
    println!("wrote {} exposures to {}", bracket.len(), a.out_dir.display());
    Ok(())
}

fn stats_cmd(a: StatsArgs) -> Result<()> {
    println!("config: cmd=stats bracket_dir={}", a.bracket_dir.display());
    let bracket = read_bracket_dir(&a.bracket_dir)?;
    let stats = clipping_stats(&bracket);
    println!("# ev dark_pct highlight_pct");
    for (ev, dark, bright) in &stats.per_ev {
        println!("{ev} {dark:.4} {bright:.4}");
    }
    Ok(())
}

fn merge_cmd(a: MergeArgs) -> Result<()> {
    println!(
        "config: cmd=merge bracket_dir={} out={} blend={} tau_black={} tau_white={} eps={} per_channel_weights={}",
        a.bracket_dir.display(),
        a.out.display(),
        a.blend.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()),
        a.taus.tau_black, a.taus.tau_white, a.taus.eps, a.taus.per_channel_weights
    );
    let bracket = read_bracket_dir(&a.bracket_dir)?;
    let cfg = a.taus.config();
    let mut merged = merge_bracket(&bracket, &cfg)?;
    if let Some(blend_path) = &a.blend {
        let input = read_ppm_file(blend_path)?;
        merged = blend_with_input(&merged, &input, &cfg)?;
    }
    fs::write(&a.out, write_pfm(&merged)?)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn posterior_stats_cmd(a: PosteriorStatsArgs) -> Result<()> {
    println!(
        "config: cmd=posterior-stats data_dir={} factor={} sigma0={} seed={}",
        a.data_dir.display(), a.factor, a.sigma0, a.seed
    );
    let images = list_files(&a.data_dir, "ppm")?
        .iter()
        .map(|p| read_ppm_file(p))
        .collect::<Result<Vec<_>>>()?;
    let stats = posterior_stats(&images, a.factor, a.sigma0, a.seed)?;
    println!("# sigma_mean sigma_max rmse_z_mu mae_z_mu resid_mean resid_std");
    println!(
        "{:e} {:e} {:e} {:e} {:.6} {:.6}",
        stats.sigma_mean, stats.sigma_max, stats.rmse_z_mu, stats.mae_z_mu, stats.resid_mean, stats.resid_std
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    println!(
        "config: cmd=train data_dir={} evs={} steps={} seed={} lr={} out={} no_film={} sampled_z={} full_bracket={} width={} stages={} bands={} cond_dim={} factor={} sigma0={}",
        a.data_dir.display(), a.evs, a.steps, a.seed, a.lr, a.out.display(),
        a.no_film, a.sampled_z, a.full_bracket, a.width, a.stages, a.bands, a.cond_dim, a.factor, a.sigma0
    );
    let corpus = list_files(&a.data_dir, "pfm")?
        .iter()
        .map(|p| read_pfm_file(p))
        .collect::<Result<Vec<_>>>()?;
    let evs = parse_ev_spec(&a.evs)?;
    let mut cfg = HeadConfig {
        channels: 3 * a.factor * a.factor,
        base_width: a.width,
        stages: a.stages,
        bands: a.bands,
        cond_dim: a.cond_dim,
        ..HeadConfig::default()
    };
    if a.no_film {
        cfg = ablate_no_film(&cfg, evs.len());
    }
    let opts = TrainOptions {
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        steps: a.steps,
        seed: a.seed,
        sampled_z: a.sampled_z,
        sigma0: a.sigma0,
        full_bracket: a.full_bracket,
    };
    let result = train(&corpus, &evs, &cfg, &opts)?;

    let mut trace_text = String::from("# step loss\n");
    for (i, loss) in result.trace.iter().enumerate() {
        writeln!(trace_text, "{i} {loss:.6e}")?;
    }
    match &a.trace {
        Some(path) => fs::write(path, trace_text)?,
        None => print!("{trace_text}"),
    }
    fs::write(&a.out, result.head.save_bytes())?;
    let final_loss = result.trace.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} params for {} steps, final loss {final_loss:.4e}, wrote {}",
        result.head.param_count(),
        result.trace.len(),
        a.out.display()
    );
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    println!("config: cmd=gradcheck seed={}", a.seed);
    let (err, params) = head_grad_check(a.seed)?;
    println!("max_rel_error {err:.6e} over {params} parameters");
    if err >= 1e-3 {
        bail!("gradient check failed: {err:.3e} >= 1e-3");
    }
    println!("gradcheck PASS");
    Ok(())
}

fn l2h_cmd(a: L2hArgs) -> Result<()> {
    println!(
        "config: cmd=l2h input={} model={} out={} blend={} evs={} tau_black={} tau_white={} eps={}",
        a.input.display(), a.model.display(), a.out.display(), a.blend, a.evs,
        a.taus.tau_black, a.taus.tau_white, a.taus.eps
    );
    let input = read_ppm_file(&a.input)?;
    let head = load_head(&a.model)?;
    let evs = parse_ev_spec(&a.evs)?;
    let factor = head.cfg.latent_factor()?;
    let cfg = a.taus.config();
    let recon = match head.cfg.variant {
        HeadVariant::Film => reconstruct_l2h(&input, &head, factor, &evs, &cfg, a.blend)?,
        HeadVariant::MultiOutput { .. } => {
            let mapper = StackMapper { head: &head, evs: evs.iter().map(|e| e.0).collect() };
            reconstruct_l2h(&input, &mapper, factor, &evs, &cfg, a.blend)?
        }
    };
    fs::write(&a.out, write_pfm(&recon)?)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn stops_cmd(a: StopsArgs) -> Result<()> {
    println!("config: cmd=stops input={} pct={}", a.input.display(), a.pct);
    let (lo, hi) = a
        .pct
        .split_once(',')
        .and_then(|(l, h)| Some((l.parse::<f64>().ok()?, h.parse::<f64>().ok()?)))
        .ok_or_else(|| anyhow!("--pct must be lo,hi"))?;
    let hdr = read_pfm_file(&a.input)?;
    let report = dynamic_range_stops(&hdr, lo, hi)?;
    println!("# p_low p_high stops clamped");
    println!("{:e} {:e} {:.4} {}", report.p_low, report.p_high, report.stops, report.clamped);
    Ok(())
}

fn trajectory_cmd(a: TrajectoryArgs) -> Result<()> {
    println!(
        "config: cmd=trajectory model={} input={} evs={} out={} hdr={}",
        a.model.display(), a.input.display(), a.evs, a.out.display(),
        a.hdr.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into())
    );
    let head = load_head(&a.model)?;
    let input = read_ppm_file(&a.input)?;
    let evs = parse_ev_spec(&a.evs)?;
    let ev_values: Vec<f64> = evs.iter().map(|e| e.0).collect();
    let factor = head.cfg.latent_factor()?;
    let z_base = encode(&input, factor, 0.0)?.mu;

    let gt_latents = match &a.hdr {
        Some(path) => {
            let hdr = read_pfm_file(path)?;
            Some(
                evs.iter()
                    .map(|&e| Ok(encode(&expose(&hdr, e)?, factor, 0.0)?.mu))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };

    let report = match head.cfg.variant {
        HeadVariant::Film => latent_trajectory(&head, &z_base, &ev_values, gt_latents.as_deref())?,
        HeadVariant::MultiOutput { .. } => {
            let mapper = StackMapper { head: &head, evs: ev_values.clone() };
            latent_trajectory(&mapper, &z_base, &ev_values, gt_latents.as_deref())?
        }
    };

    let mut text = String::from("# ev d_gt d_pred\n");
    for (e, d_gt, d_pred) in &report.rows {
        writeln!(text, "{e} {d_gt:.6} {d_pred:.6}")?;
    }
    writeln!(text, "# monotone_fraction {:.4}", report.monotone_fraction)?;
    fs::write(&a.out, &text)?;
    println!("monotone_fraction {:.4}, wrote {}", report.monotone_fraction, a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    println!(
        "config: cmd=eval data_dir={} model={} blend={} evs={} tau_black={} tau_white={} eps={}",
        a.data_dir.display(), a.model.display(), a.blend, a.evs,
        a.taus.tau_black, a.taus.tau_white, a.taus.eps
    );
    let head = load_head(&a.model)?;
    let evs = parse_ev_spec(&a.evs)?;
    let factor = head.cfg.latent_factor()?;
    let scenes = list_files(&a.data_dir, "pfm")?
        .iter()
        .map(|p| {
            let hdr = read_pfm_file(p)?;
            let input = expose(&hdr, ExposureValue::new(0.0)?)?;
            Ok((input, hdr))
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = a.taus.config();
    let report = match head.cfg.variant {
        HeadVariant::Film => eval_l2h(&scenes, &head, factor, &evs, &cfg, a.blend)?,
        HeadVariant::MultiOutput { .. } => {
            let mapper = StackMapper { head: &head, evs: evs.iter().map(|e| e.0).collect() };
            eval_l2h(&scenes, &mapper, factor, &evs, &cfg, a.blend)?
        }
    };
    println!("# scene stops median_rel_err p99_rel_err");
    for (i, row) in report.rows.iter().enumerate() {
        println!("{i} {:.4} {:.6} {:.6}", row.stops, row.median_rel_err, row.p99_rel_err);
    }
    println!(
        "# summary mean_stops {:.4} std_stops {:.4} mean_median_rel_err {:.6}",
        report.mean_stops, report.std_stops, report.mean_median_rel_err
    );
    Ok(())
}
