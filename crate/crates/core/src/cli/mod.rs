//! Command-line front end. Every workflow is a subcommand that reads an
//! optional JSON [`RunConfig`], applies flag overrides (flag > config >
//! default), writes its artifacts under `--out` and finishes with a
//! `<subcommand>.manifest.json`.

mod config;
mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crate::autodiff::ParamStore;
use crate::checkpoint;
use crate::diffusion_toy::{
    edit_curve_csv, edit_pairs, evaluate_edit, grid_csv, grid_trend_violations, load_edit_block, loss_csv,
    new_edit_block, recon_grid, train_denoiser, train_edit_module, bottleneck_samples, DenoiserConfig, EditHook, Pipeline,
    PruneSpec, Split, SyntheticDataset, ToyDenoiser, ToyImage, BASE_SOURCE_TEXT, BASE_TARGET_TEXT,
};
use crate::error::{Error, Result};
use crate::geometry::{selftest, SolverConfig};
use crate::metrics_flops::{bench_csv, bench_speedup, flops_report_csv, unet_flops_breakdown, ArchConfig};
use crate::prompt_enrichment::{
    edit_direction, enrich_or_fallback, estimate_labels, target_caption, Backend, CaptionRequest, EMBED_DIM,
};
use crate::pruned_attention::{
    curve_csv, hard_prune_mse, heatmap_pgm, random_prune_mse, train_pruning_head, PrunerSample, PruningHead,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use config::{EditSection, GridSection, ModelSection, PruningSection, RunConfig, ScheduleConfig};
pub use manifest::{file_sha256, git_describe, sha256_hex, write_atomic, OutputEntry, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "geoedit", version, about = "Geodesic latent editing on a toy DDIM pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy ε-prediction denoiser on synthetic shapes.
    TrainDenoiser(TrainDenoiserArgs),
    /// Train the geodesic edit block against a frozen denoiser.
    TrainEdit(TrainEditArgs),
    /// Train the direction-conditioned token pruning head.
    TrainPruner(TrainPrunerArgs),
    /// DDIM-invert one PGM image to a latent checkpoint.
    Invert(InvertArgs),
    /// Edit one PGM image end to end and print the stage timing line.
    Edit(EditArgs),
    /// Reconstruction error over a grid of depths and step counts.
    ReconGrid(ReconGridArgs),
    /// Dense versus pruned attention wall-clock.
    BenchAttn(BenchAttnArgs),
    /// Analytic FLOPs breakdown of a U-Net architecture.
    Flops(FlopsArgs),
    /// Geodesic solver checks on analytic manifolds.
    SelftestGeometry(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Checkpoints {
    /// Denoiser checkpoint [default: <out>/denoiser.remd].
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    /// Edit block checkpoint [default: <out>/edit.remd].
    #[arg(long)]
    pub edit_module: Option<PathBuf>,
    /// Pruning head checkpoint [default: <out>/pruner.remd].
    #[arg(long)]
    pub pruner: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct EditFlags {
    #[arg(long)]
    pub alpha_inner: Option<f64>,
    #[arg(long)]
    pub alpha_outer: Option<f64>,
    /// Fuse at every denoising step instead of only the last one.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", require_equals = true)]
    pub outer_per_step: Option<bool>,
    /// Bottleneck token pruning ratio.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub t0: Option<f64>,
    #[arg(long)]
    pub s_for: Option<usize>,
    #[arg(long)]
    pub s_gen: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackendArg {
    Mock,
    Http,
}

#[derive(Debug, Default, Args)]
pub struct CaptionFlags {
    #[arg(long, value_enum)]
    pub caption_backend: Option<BackendArg>,
    #[arg(long)]
    pub caption_endpoint: Option<String>,
    #[arg(long)]
    pub caption_model: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainDenoiserArgs {
    #[command(flatten)]
    pub common: Common,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainEditArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub ckpt: Checkpoints,
    #[command(flatten)]
    pub edit: EditFlags,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainPrunerArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub ckpt: Checkpoints,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub ckpt: Checkpoints,
    #[command(flatten)]
    pub edit: EditFlags,
    /// Source image (PGM, 32×32).
    #[arg(long)]
    pub input: PathBuf,
    /// Latent checkpoint [default: <out>/latent.remd].
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub ckpt: Checkpoints,
    #[command(flatten)]
    pub edit: EditFlags,
    #[command(flatten)]
    pub caption: CaptionFlags,
    /// Source image (PGM, 32×32).
    #[arg(long)]
    pub input: PathBuf,
    /// Edited image [default: <out>/edited.pgm].
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconGridArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub ckpt: Checkpoints,
    /// Held-out images per cell.
    #[arg(long)]
    pub images: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchAttnArgs {
    #[command(flatten)]
    pub common: Common,
    /// Tokens.
    #[arg(long)]
    pub n: Option<usize>,
    /// Channels.
    #[arg(long)]
    pub c: Option<usize>,
    /// Comma-separated pruning ratios.
    #[arg(long, value_delimiter = ',')]
    pub rho: Option<Vec<f64>>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Architecture JSON [default: shipped reference architecture].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated square resolutions.
    #[arg(long, value_delimiter = ',', default_value = "256,512")]
    pub res: Vec<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code: 0 success, 1 usage or configuration error, 2 runtime
/// failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainDenoiser(a) => cmd_train_denoiser(a),
        Command::TrainEdit(a) => cmd_train_edit(a),
        Command::TrainPruner(a) => cmd_train_pruner(a),
        Command::Invert(a) => cmd_invert(a),
        Command::Edit(a) => cmd_edit(a),
        Command::ReconGrid(a) => cmd_recon_grid(a),
        Command::BenchAttn(a) => cmd_bench_attn(a),
        Command::Flops(a) => cmd_flops(a),
        Command::SelftestGeometry(a) => cmd_selftest(a),
    }
}

/// Loaded config plus the manifest being built for this run.
struct Run {
    cfg: RunConfig,
    manifest: RunManifest,
    out: PathBuf,
    start: Instant,
}

impl Run {
    fn start(name: &str, common: &Common, apply: impl FnOnce(&mut RunConfig, &mut Overrides)) -> Result<Self> {
        let start = Instant::now();
        let (mut cfg, bytes) = match &common.config {
            Some(p) => {
                let (c, b) = RunConfig::load(p)?;
                (c, Some(b))
            }
            None => (RunConfig::default(), None),
        };
        let mut ov = Overrides::default();
        ov.set("seed", &mut cfg.seed, common.seed);
        apply(&mut cfg, &mut ov);
        cfg.validate()?;
        let mut manifest = RunManifest::new(name, bytes.as_deref(), common.config.clone(), cfg.seed);
        manifest.overrides = ov.0;
        std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
        Ok(Self {
            cfg,
            manifest,
            out: common.out.clone(),
            start,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        self.manifest.write_output(&p, bytes)?;
        Ok(p)
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.wall_clock_s = self.start.elapsed().as_secs_f64();
        let p = self.path(&format!("{}.manifest.json", self.manifest.subcommand));
        self.manifest.save(&p)?;
        info!("wrote {}", p.display());
        Ok(())
    }
}

/// Flag overrides applied so far, as `key=value` strings.
#[derive(Default)]
struct Overrides(Vec<String>);

impl Overrides {
    fn set<T: std::fmt::Debug>(&mut self, key: &str, slot: &mut T, flag: Option<T>) {
        if let Some(v) = flag {
            self.0.push(format!("{key}={v:?}"));
            *slot = v;
        }
    }
}

fn apply_edit_flags(cfg: &mut RunConfig, ov: &mut Overrides, f: &EditFlags) {
    let r = &mut cfg.edit.run;
    ov.set("edit.run.alpha_inner", &mut r.alpha_inner, f.alpha_inner);
    ov.set("edit.run.alpha_outer", &mut r.alpha_outer, f.alpha_outer);
    ov.set("edit.run.outer_per_step", &mut r.outer_per_step, f.outer_per_step);
    ov.set("edit.run.rho", &mut r.rho, f.rho);
    ov.set("edit.run.t0", &mut r.t0, f.t0);
    ov.set("edit.run.s_for", &mut r.s_for, f.s_for);
    ov.set("edit.run.s_gen", &mut r.s_gen, f.s_gen);
}

fn apply_caption_flags(cfg: &mut RunConfig, ov: &mut Overrides, f: &CaptionFlags) {
    let backend = f.caption_backend.map(|b| match b {
        BackendArg::Mock => Backend::Mock,
        BackendArg::Http => Backend::Http,
    });
    ov.set("caption.backend", &mut cfg.caption.backend, backend);
    ov.set("caption.endpoint", &mut cfg.caption.endpoint, f.caption_endpoint.clone().map(Some));
    ov.set("caption.model", &mut cfg.caption.model, f.caption_model.clone());
}

fn ckpt_path(given: &Option<PathBuf>, out: &Path, default: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| out.join(default))
}

/// Loads a parameter store, naming `role` when the file is absent.
fn load_store(role: &str, path: &Path) -> Result<ParamStore> {
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("missing {role} checkpoint: {}", path.display())));
    }
    checkpoint::store_from_tensors(checkpoint::load(path)?)
}

fn load_denoiser(run: &mut Run, ckpt: &Checkpoints) -> Result<(ToyDenoiser, ParamStore)> {
    let path = ckpt_path(&ckpt.denoiser, &run.out, "denoiser.remd");
    let store = load_store("denoiser", &path)?;
    run.manifest.checkpoint("denoiser", &path)?;
    let model = ToyDenoiser::from_store(&store, DenoiserConfig::infer(&store)?)?;
    Ok((model, store))
}

fn cmd_train_denoiser(a: TrainDenoiserArgs) -> Result<()> {
    let mut run = Run::start("train-denoiser", &a.common, |c, ov| {
        ov.set("model.train.steps", &mut c.model.train.steps, a.steps);
    })?;
    let cfg = run.cfg.clone();
    let schedule = cfg.schedule.build()?;
    let images = SyntheticDataset::new(cfg.seed, Split::Train, cfg.model.train_images).images()?;
    let mut rng = Rng::new(cfg.seed);
    let mut store = ParamStore::new();
    let model = ToyDenoiser::new(&mut store, cfg.model.arch, &mut rng)?;
    let curve = train_denoiser(&model, &mut store, &schedule, &images, &cfg.model.train, &mut rng)?;
    if let Some(last) = curve.last() {
        run.manifest.notes.push(format!("final training loss {:.6e}", last.loss));
    }
    let bytes = checkpoint::encode(&checkpoint::store_tensors(&store), checkpoint::DType::F64);
    run.write("denoiser.remd", &bytes)?;
    run.write("denoiser_loss.csv", loss_csv(&curve).as_bytes())?;
    run.finish()
}

fn cmd_train_edit(a: TrainEditArgs) -> Result<()> {
    let mut run = Run::start("train-edit", &a.common, |c, ov| {
        apply_edit_flags(c, ov, &a.edit);
        ov.set("edit.train.epochs", &mut c.edit.train.epochs, a.epochs);
    })?;
    let cfg = run.cfg.clone();
    let (model, store) = load_denoiser(&mut run, &a.ckpt)?;
    let schedule = cfg.schedule.build()?;
    let e = &cfg.edit;
    let train = SyntheticDataset::new(cfg.seed, Split::Train, e.train_pairs).pairs(e.attribute, e.shift)?;
    let train = edit_pairs(train, e.attribute, e.enriched)?;
    let heldout = SyntheticDataset::new(cfg.seed, Split::HeldOut, e.heldout_pairs).pairs(e.attribute, e.shift)?;
    let heldout = edit_pairs(heldout, e.attribute, e.enriched)?;

    let mut rng = Rng::new(cfg.seed).fork(1);
    let mut edit_store = ParamStore::new();
    let block = new_edit_block(&mut edit_store, &model, EMBED_DIM, &e.train, &mut rng)?;
    let curve = train_edit_module(&model, &store, &schedule, &block, &mut edit_store, &train, &e.train, &mut rng)?;
    let bytes = checkpoint::encode(&checkpoint::store_tensors(&edit_store), checkpoint::DType::F64);
    run.write("edit.remd", &bytes)?;
    run.write("edit_loss.csv", edit_curve_csv(&curve).as_bytes())?;

    let pipeline = Pipeline {
        model: &model,
        store: &store,
        schedule: &schedule,
        prune: None,
    };
    let ev = evaluate_edit(&pipeline, &block, &edit_store, &heldout, &e.run)?;
    let csv = format!(
        "pairs,alpha_inner,alpha_outer,outer_per_step,probe_gain,background_mae,recon_probe_gain\n{},{},{},{},{:.8e},{:.8e},{:.8e}\n",
        heldout.len(),
        e.run.alpha_inner,
        e.run.alpha_outer,
        e.run.outer_per_step,
        ev.probe_gain,
        ev.background_mae,
        ev.recon_probe_gain
    );
    run.write("edit_eval.csv", csv.as_bytes())?;
    println!(
        "held-out probe gain {:.4} (reconstruction {:.4}), background MAE {:.4}",
        ev.probe_gain, ev.recon_probe_gain, ev.background_mae
    );
    run.finish()
}

fn cmd_train_pruner(a: TrainPrunerArgs) -> Result<()> {
    let mut run = Run::start("train-pruner", &a.common, |c, ov| {
        let t = &mut c.pruning.train;
        ov.set("pruning.train.steps", &mut t.steps, a.steps);
        ov.set("pruning.train.lambda_sparsity", &mut t.lambda_sparsity, a.lambda);
        ov.set("pruning.train.lr", &mut t.lr, a.lr);
    })?;
    let cfg = run.cfg.clone();
    let (model, store) = load_denoiser(&mut run, &a.ckpt)?;
    let schedule = cfg.schedule.build()?;
    let p = &cfg.pruning;
    let mut rng = Rng::new(cfg.seed).fork(2);
    let samples = |split, count, rng: &mut Rng| -> Result<Vec<PrunerSample>> {
        let pairs = SyntheticDataset::new(cfg.seed, split, count).pairs(cfg.edit.attribute, cfg.edit.shift)?;
        let pairs = edit_pairs(pairs, cfg.edit.attribute, cfg.edit.enriched)?;
        let images: Vec<&ToyImage> = pairs.iter().map(|p| &p.source.image).collect();
        let dirs: Vec<Vec<f64>> = pairs.iter().map(|p| p.direction.clone()).collect();
        bottleneck_samples(&model, &store, &schedule, &images, &dirs, p.tau_max, rng)
    };
    let train = samples(Split::Train, p.samples, &mut rng)?;
    let heldout = samples(Split::HeldOut, p.heatmaps.max(32), &mut rng)?;

    let mut head_store = ParamStore::new();
    let head = PruningHead::new(&mut head_store, "head", model.cfg.c3, EMBED_DIM, &mut rng)?;
    let curve = train_pruning_head(&train, &model.attn, &store, &head, &mut head_store, &p.train, &mut rng)?;
    let bytes = checkpoint::encode(&checkpoint::store_tensors(&head_store), checkpoint::DType::F64);
    run.write("pruner.remd", &bytes)?;
    run.write("pruner_loss.csv", curve_csv(&curve).as_bytes())?;

    let weights = model.attn.weights(&store)?;
    let head_mse = hard_prune_mse(&heldout, &weights, &head, &head_store, p.train.rho)?;
    let random_mse = random_prune_mse(&heldout, &weights, p.train.rho, &mut rng)?;
    let csv = format!("rho,head_mse,random_mse\n{},{head_mse:.8e},{random_mse:.8e}\n", p.train.rho);
    run.write("pruner_eval.csv", csv.as_bytes())?;
    let side = model.cfg.bottleneck_side();
    for (i, s) in heldout.iter().take(p.heatmaps).enumerate() {
        let scores = head.score(&head_store, s.tokens.data(), model.cfg.tokens(), &s.direction)?;
        run.write(&format!("importance_{i:02}.pgm"), &heatmap_pgm(&scores, side)?)?;
    }
    println!("held-out pruned-attention MSE at rho={}: head {head_mse:.4e}, random {random_mse:.4e}", p.train.rho);
    run.finish()
}

fn cmd_invert(a: InvertArgs) -> Result<()> {
    let mut run = Run::start("invert", &a.common, |c, ov| apply_edit_flags(c, ov, &a.edit))?;
    let cfg = run.cfg.clone();
    let img = ToyImage::load(&a.input)?;
    let (model, store) = load_denoiser(&mut run, &a.ckpt)?;
    let schedule = cfg.schedule.build()?;
    let pipeline = Pipeline {
        model: &model,
        store: &store,
        schedule: &schedule,
        prune: None,
    };
    let r = &cfg.edit.run;
    let xt = pipeline.invert(&img.to_tensor(), r.t0, r.s_for)?;
    let tensors = vec![
        ("latent".to_string(), xt),
        ("t0".to_string(), Tensor::vector(vec![r.t0])),
    ];
    let out = a.output.clone().unwrap_or_else(|| run.path("latent.remd"));
    run.manifest.write_output(&out, &checkpoint::encode(&tensors, checkpoint::DType::F64))?;
    run.finish()
}

/// Wall-clock of the end-to-end edit stages.
#[derive(Clone, Copy, Debug, Default)]
struct StageTimes {
    captioning: Duration,
    inversion: Duration,
    geodesic: Duration,
    generation: Duration,
    decoding: Duration,
}

impl StageTimes {
    fn total(&self) -> Duration {
        self.captioning + self.inversion + self.geodesic + self.generation + self.decoding
    }

    fn line(&self) -> String {
        format!(
            "timing captioning_s={:.6} inversion_s={:.6} geodesic_s={:.6} generation_s={:.6} decoding_s={:.6} total_s={:.6}",
            self.captioning.as_secs_f64(),
            self.inversion.as_secs_f64(),
            self.geodesic.as_secs_f64(),
            self.generation.as_secs_f64(),
            self.decoding.as_secs_f64(),
            self.total().as_secs_f64()
        )
    }
}

/// Source and target texts for one image, and the resulting direction.
fn caption_direction(run: &mut Run, img: &ToyImage) -> Result<Vec<f64>> {
    let cfg = &run.cfg;
    let r = &cfg.edit.run;
    let req = CaptionRequest::new(img.clone(), None, &r.target_text)?;
    let cap = enrich_or_fallback(&req, &cfg.caption, &r.source_text)?;
    let (source, target) = if cap.fallback || !cfg.edit.enriched {
        (r.source_text.clone(), r.target_text.clone())
    } else {
        match cfg.caption.backend {
            Backend::Mock => (cap.text.clone(), target_caption(&estimate_labels(img), cfg.edit.attribute)),
            Backend::Http => (cap.text.clone(), format!("{}, {}", cap.text, r.target_text)),
        }
    };
    let dir = match edit_direction(&source, &target) {
        Err(Error::Degenerate(m)) => {
            warn!("edit direction degenerate ({m}); using the base prompts");
            edit_direction(BASE_SOURCE_TEXT, BASE_TARGET_TEXT)?
        }
        d => d?,
    };
    run.manifest.notes.push(format!("caption provider {}: {:?} -> {:?}", cap.provider, source, target));
    Ok(dir)
}

fn cmd_edit(a: EditArgs) -> Result<()> {
    let mut run = Run::start("edit", &a.common, |c, ov| {
        apply_edit_flags(c, ov, &a.edit);
        apply_caption_flags(c, ov, &a.caption);
    })?;
    let cfg = run.cfg.clone();
    let r = &cfg.edit.run;
    let img = ToyImage::load(&a.input)?;
    let (model, store) = load_denoiser(&mut run, &a.ckpt)?;
    let edit_path = ckpt_path(&a.ckpt.edit_module, &run.out, "edit.remd");
    let edit_store = load_store("edit", &edit_path)?;
    run.manifest.checkpoint("edit", &edit_path)?;
    let block = load_edit_block(&edit_store, &cfg.edit.train)?;
    let pruner = if r.rho > 0.0 {
        let path = ckpt_path(&a.ckpt.pruner, &run.out, "pruner.remd");
        let s = load_store("pruner", &path)?;
        run.manifest.checkpoint("pruner", &path)?;
        let head = PruningHead::from_store(&s, "head")?;
        Some((head, s))
    } else {
        None
    };
    let schedule = cfg.schedule.build()?;
    let mut times = StageTimes::default();

    let t = Instant::now();
    let dir = caption_direction(&mut run, &img)?;
    times.captioning = t.elapsed();
    let dirs = Tensor::new(vec![1, dir.len()], dir)?;

    let pipeline = Pipeline {
        model: &model,
        store: &store,
        schedule: &schedule,
        prune: pruner.as_ref().map(|(head, s)| PruneSpec {
            head,
            store: s,
            rho: r.rho,
            dirs: &dirs,
        }),
    };
    let t = Instant::now();
    let xt = pipeline.invert(&img.to_tensor(), r.t0, r.s_for)?;
    times.inversion = t.elapsed();

    let hook = EditHook {
        block: &block,
        store: &edit_store,
        dirs: &dirs,
        blend: r.blend(),
        outer_per_step: r.outer_per_step,
    };
    let t = Instant::now();
    let out = pipeline.generate(&xt, r.t0, r.s_gen, Some(&hook))?;
    let elapsed = t.elapsed();
    times.geodesic = out.geodesic_time;
    times.generation = elapsed.saturating_sub(out.geodesic_time);

    let t = Instant::now();
    let edited = ToyImage::unbatch(&out.x0_final)?.remove(0);
    let pgm = edited.to_pgm();
    times.decoding = t.elapsed();

    let path = a.output.clone().unwrap_or_else(|| run.path("edited.pgm"));
    run.manifest.write_output(&path, &pgm)?;
    let line = times.line();
    println!("{line}");
    run.manifest.notes.push(line);
    run.manifest.notes.push(format!("geodesic solver steps {}", out.geodesic_steps));
    run.finish()
}

fn cmd_recon_grid(a: ReconGridArgs) -> Result<()> {
    let mut run = Run::start("recon-grid", &a.common, |c, ov| {
        ov.set("grid.images", &mut c.grid.images, a.images);
    })?;
    let cfg = run.cfg.clone();
    let (model, store) = load_denoiser(&mut run, &a.ckpt)?;
    let schedule = cfg.schedule.build()?;
    let pipeline = Pipeline {
        model: &model,
        store: &store,
        schedule: &schedule,
        prune: None,
    };
    let images = SyntheticDataset::new(cfg.seed, Split::HeldOut, cfg.grid.images).images()?;
    let cells = recon_grid(&pipeline, &images, &cfg.grid.cells)?;
    let csv = grid_csv(&cells);
    run.write("grid.csv", csv.as_bytes())?;
    print!("{csv}");
    for v in grid_trend_violations(&cells) {
        warn!("reconstruction trend: {v}");
        run.manifest.notes.push(format!("trend violation: {v}"));
    }
    run.finish()
}

fn cmd_bench_attn(a: BenchAttnArgs) -> Result<()> {
    let mut run = Run::start("bench-attn", &a.common, |c, ov| {
        let b = &mut c.bench;
        ov.set("bench.tokens", &mut b.tokens, a.n);
        ov.set("bench.channels", &mut b.channels, a.c);
        ov.set("bench.rhos", &mut b.rhos, a.rho.clone());
        ov.set("bench.repeats", &mut b.repeats, a.repeats);
        ov.set("bench.seed", &mut b.seed, a.common.seed);
    })?;
    let records = bench_speedup(&run.cfg.bench)?;
    let csv = bench_csv(&records);
    run.write("bench_attn.csv", csv.as_bytes())?;
    print!("{csv}");
    run.finish()
}

fn cmd_flops(a: FlopsArgs) -> Result<()> {
    let start = Instant::now();
    let (arch, bytes) = match &a.config {
        Some(p) => {
            let b = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let text = std::str::from_utf8(&b).map_err(|_| Error::Config(format!("{}: not UTF-8", p.display())))?;
            (ArchConfig::parse(text)?, Some(b))
        }
        None => (ArchConfig::reference(), None),
    };
    if a.res.is_empty() {
        return Err(Error::Config("--res needs at least one resolution".into()));
    }
    let reports = a
        .res
        .iter()
        .map(|&r| unet_flops_breakdown(&arch, r))
        .collect::<Result<Vec<_>>>()?;
    let csv = flops_report_csv(&arch, &reports);
    let mut manifest = RunManifest::new("flops", bytes.as_deref(), a.config.clone(), 0);
    manifest.write_output(&a.out.join("flops.csv"), csv.as_bytes())?;
    print!("{csv}");
    manifest.wall_clock_s = start.elapsed().as_secs_f64();
    manifest.save(&a.out.join("flops.manifest.json"))
}

fn cmd_selftest(a: SelftestArgs) -> Result<()> {
    let start = Instant::now();
    let rows = selftest::run(&SolverConfig::default())?;
    let csv = selftest::to_csv(&rows);
    let mut manifest = RunManifest::new("selftest-geometry", None, None, 0);
    manifest.write_output(&a.out.join("selftest_geometry.csv"), csv.as_bytes())?;
    print!("{csv}");
    manifest.wall_clock_s = start.elapsed().as_secs_f64();
    manifest.save(&a.out.join("selftest-geometry.manifest.json"))?;
    let failed: Vec<String> = rows.iter().filter(|r| !r.pass).map(|r| format!("{}/{}", r.manifold, r.test)).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Failed(format!("geometry selftest failed: {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_record_and_apply() {
        let mut ov = Overrides::default();
        let mut x = 1.0;
        ov.set("a.b", &mut x, None);
        assert_eq!((x, ov.0.len()), (1.0, 0));
        ov.set("a.b", &mut x, Some(0.5));
        assert_eq!(x, 0.5);
        assert_eq!(ov.0, vec!["a.b=0.5".to_string()]);
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from(["geoedit", "edit", "--input", "x.pgm", "--alpha-inner", "0.3", "--outer-per-step=false"]).unwrap();
        let Command::Edit(a) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(a.edit.alpha_inner, Some(0.3));
        assert_eq!(a.edit.outer_per_step, Some(false));
        let cli = Cli::try_parse_from(["geoedit", "bench-attn", "--rho", "0,0.5"]).unwrap();
        let Command::BenchAttn(a) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(a.rho, Some(vec![0.0, 0.5]));
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["geoedit", "edit", "--bogus"]), 1);
        assert_eq!(run(["geoedit", "--help"]), 0);
    }

    #[test]
    fn stage_total_sums() {
        let t = StageTimes {
            captioning: Duration::from_millis(1),
            inversion: Duration::from_millis(2),
            geodesic: Duration::from_millis(3),
            generation: Duration::from_millis(4),
            decoding: Duration::from_millis(5),
        };
        assert_eq!(t.total(), Duration::from_millis(15));
        assert!(t.line().ends_with("total_s=0.015000"));
    }
}
