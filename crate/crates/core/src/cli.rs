//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical abort.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dimred::{load_checkpoint, save_checkpoint, DimredMethod};
use crate::error::Error;
use crate::grid::{warp_volume, DisplacementField, FeatureVolume, Interpolation, Volume};
use crate::instance_opt::{trace_csv, Mode, RegConfig};
use crate::io::{self, Frame, Kind, LandmarkSet};
use crate::metrics::{evaluate, LabelMask, LandmarkPair, MetricsReport, DEFAULT_CPM_THRESHOLDS};
use crate::mind::{extract_mind, MindConfig};
use crate::pipeline::{PairContext, Registration};
use crate::synth::{self, bundle, mock_embeddings, BundleManifest, SynthSpec, Texture};

pub const SEED_ENV: &str = "GLIDE_SEED";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Engine(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Engine(Error::NonFiniteLoss { .. } | Error::NonFinite(_)) => 3,
            CliError::Engine(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Engine(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Engine(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Engine(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Engine(Error::Json(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

#[derive(Parser, Debug)]
#[command(name = "glide", version, about = "Deformable 3D registration with fused global and local features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Register a moving volume onto a fixed volume.
    Register(RegisterArgs),
    /// Evaluate a displacement against masks and landmarks.
    Metrics(MetricsArgs),
    /// Write a synthetic pair bundle.
    Synth(SynthArgs),
    /// Compute MIND descriptors of a volume.
    ExtractMind(ExtractMindArgs),
    /// Run the five ablation configurations on bundles.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Glide,
    GlobalOnly,
    LocalOnly,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Glide => Mode::Glide,
            ModeArg::GlobalOnly => Mode::GlobalOnly,
            ModeArg::LocalOnly => Mode::LocalOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DimredArg {
    Pca,
    Sdr,
    Ddr,
}

impl From<DimredArg> for DimredMethod {
    fn from(m: DimredArg) -> Self {
        match m {
            DimredArg::Pca => DimredMethod::Pca,
            DimredArg::Sdr => DimredMethod::Sdr,
            DimredArg::Ddr => DimredMethod::Ddr,
        }
    }
}

/// Registration settings shared by `register` and `ablate`.
#[derive(Args, Debug, Clone, Default)]
pub struct RegFlags {
    /// JSON file with any subset of the registration config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr_disp: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub delta1: Option<f64>,
    #[arg(long)]
    pub delta2: Option<f64>,
    #[arg(long)]
    pub lr_vae: Option<f64>,
    #[arg(long)]
    pub down_factor: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub search_radius: Option<usize>,
    /// Embedding channels for --mock-embeddings.
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RegisterArgs {
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    #[arg(long)]
    pub moving: Option<PathBuf>,
    #[arg(long)]
    pub global_features_fixed: Option<PathBuf>,
    #[arg(long)]
    pub global_features_moving: Option<PathBuf>,
    /// Synthesize global features from the intensities instead of reading them.
    #[arg(long)]
    pub mock_embeddings: bool,
    #[arg(long)]
    pub fixed_mask: Option<PathBuf>,
    #[arg(long)]
    pub moving_mask: Option<PathBuf>,
    #[arg(long)]
    pub fixed_landmarks: Option<PathBuf>,
    #[arg(long)]
    pub moving_landmarks: Option<PathBuf>,
    /// Synth bundle directory providing every input.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// JSON list of jobs, each with the input keys above and `out`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub dimred: Option<DimredArg>,
    /// Initial VAE weights (pretrained weights for `sdr`).
    #[arg(long)]
    pub vae_ckpt: Option<PathBuf>,
    /// Write the final VAE weights here.
    #[arg(long)]
    pub save_vae: Option<PathBuf>,
    /// Loss trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub dump_intermediate: Option<PathBuf>,
    /// PNG with fixed, warped and difference of the middle axial slice.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    #[command(flatten)]
    pub reg: RegFlags,
}

#[derive(Args, Debug, Clone)]
pub struct MetricsArgs {
    /// Displacement GVOL on the fixed grid.
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub fixed_mask: Option<PathBuf>,
    /// Moving mask; warped with nearest-neighbour sampling before scoring.
    #[arg(long)]
    pub moving_mask: Option<PathBuf>,
    #[arg(long)]
    pub fixed_landmarks: Option<PathBuf>,
    #[arg(long)]
    pub moving_landmarks: Option<PathBuf>,
    /// CPM thresholds in mm.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TextureArg {
    Blobs,
    Bands,
    Checker,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON spec; flags override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub frequency: Option<f64>,
    #[arg(long, value_enum)]
    pub texture: Option<TextureArg>,
    #[arg(long)]
    pub n_landmarks: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct ExtractMindArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub radius: Option<usize>,
    #[arg(long)]
    pub dilation: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    /// One or more synth bundle directories.
    #[arg(long, required = true, num_args = 1..)]
    pub bundle: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub reg: RegFlags,
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Engine(Error::NonFiniteLoss { trace, .. }) = &e {
                eprintln!("loss trace up to the failure:\n{trace}");
            }
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Register(a) => cmd_register(&a),
        Command::Metrics(a) => cmd_metrics(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::ExtractMind(a) => cmd_extract_mind(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| config_err(format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Built-in defaults, then the seed environment variable, then the config
/// file, then explicit flags.
pub fn resolve_config(flags: &RegFlags) -> CliResult<RegConfig> {
    let mut cfg = RegConfig::default();
    if let Some(s) = env_seed()? {
        cfg.dimred.seed = s;
    }
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read --config {}: {e}", path.display())))?;
        let over: Value = serde_json::from_str(&text)
            .map_err(|e| config_err(format!("--config {} is not valid JSON: {e}", path.display())))?;
        let mut base = serde_json::to_value(&cfg)?;
        merge(&mut base, over);
        cfg = serde_json::from_value(base).map_err(|e| config_err(format!("--config {}: {e}", path.display())))?;
    }
    let f = flags;
    if let Some(v) = f.seed {
        cfg.dimred.seed = v;
    }
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(cfg.iters, f.iters);
    set!(cfg.lr_disp, f.lr_disp);
    set!(cfg.lambda, f.lambda);
    set!(cfg.alpha, f.alpha);
    set!(cfg.beta, f.beta);
    set!(cfg.down_factor, f.down_factor);
    set!(cfg.dimred.delta1, f.delta1);
    set!(cfg.dimred.delta2, f.delta2);
    set!(cfg.dimred.lr_vae, f.lr_vae);
    set!(cfg.dimred.hidden_dim, f.hidden_dim);
    set!(cfg.convex.search_radius, f.search_radius);
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(cfg)
}

/// Inputs and outputs of one registration job.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct JobConfig {
    pub fixed: Option<PathBuf>,
    pub moving: Option<PathBuf>,
    pub global_features_fixed: Option<PathBuf>,
    pub global_features_moving: Option<PathBuf>,
    pub mock_embeddings: bool,
    pub fixed_mask: Option<PathBuf>,
    pub moving_mask: Option<PathBuf>,
    pub fixed_landmarks: Option<PathBuf>,
    pub moving_landmarks: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl JobConfig {
    /// Fill unset inputs from a synth bundle manifest.
    fn with_bundle(mut self) -> CliResult<Self> {
        let Some(dir) = self.bundle.clone() else { return Ok(self) };
        let path = dir.join(bundle::MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| config_err(format!("--bundle {}: cannot read {}: {e}", dir.display(), bundle::MANIFEST)))?;
        let m: BundleManifest =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let get = |k: &str| m.files.get(k).map(|f| dir.join(f));
        fn fill(slot: &mut Option<PathBuf>, v: Option<PathBuf>) {
            if slot.is_none() {
                *slot = v;
            }
        }
        fill(&mut self.fixed, get("fixed"));
        fill(&mut self.moving, get("moving"));
        if !self.mock_embeddings {
            fill(&mut self.global_features_fixed, get("gf_fixed"));
            fill(&mut self.global_features_moving, get("gf_moving"));
        }
        fill(&mut self.fixed_mask, get("mask_fixed"));
        fill(&mut self.moving_mask, get("mask_moving"));
        fill(&mut self.fixed_landmarks, get("landmarks_fixed"));
        fill(&mut self.moving_landmarks, get("landmarks_moving"));
        Ok(self)
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a PathBuf> {
    v.as_ref().ok_or_else(|| config_err(format!("missing required flag {flag}")))
}

fn read_intensity(path: &Path, flag: &str) -> CliResult<Volume> {
    io::read_volume(path)
        .map(|(v, _)| v)
        .map_err(|e| config_err(format!("{flag} {}: {e}", path.display())))
}

fn read_feats(path: &Path, flag: &str) -> CliResult<FeatureVolume> {
    io::read_features(path).map_err(|e| config_err(format!("{flag} {}: {e}", path.display())))
}

/// Loaded inputs of a job.
struct LoadedJob {
    ctx: PairContext,
    masks: Option<(LabelMask, Volume)>,
    landmarks: Option<(LandmarkSet, LandmarkSet)>,
}

fn load_job(job: &JobConfig, cfg: &RegConfig, embed_dim: usize) -> CliResult<LoadedJob> {
    let fixed = read_intensity(require(&job.fixed, "--fixed")?, "--fixed")?;
    let moving = read_intensity(require(&job.moving, "--moving")?, "--moving")?;
    let global = if job.mock_embeddings {
        let grid = fixed.dims().map(|n| n);
        let grid = [(grid[0] / 4).max(1), (grid[1] / 4).max(1), grid[2]];
        Some((
            mock_embeddings(&fixed, embed_dim, grid, cfg.dimred.seed)?,
            mock_embeddings(&moving, embed_dim, grid, cfg.dimred.seed)?,
        ))
    } else {
        match (&job.global_features_fixed, &job.global_features_moving) {
            (Some(f), Some(m)) => Some((
                read_feats(f, "--global-features-fixed")?,
                read_feats(m, "--global-features-moving")?,
            )),
            (None, None) => None,
            (None, Some(_)) => return Err(config_err("missing required flag --global-features-fixed")),
            (Some(_), None) => return Err(config_err("missing required flag --global-features-moving")),
        }
    };
    if cfg.mode.uses_global() && global.is_none() {
        let mode = serde_json::to_value(cfg.mode)?;
        return Err(config_err(format!(
            "mode {} needs --global-features-fixed and --global-features-moving (or --mock-embeddings)",
            mode.as_str().unwrap_or("glide")
        )));
    }
    let masks = match (&job.fixed_mask, &job.moving_mask) {
        (Some(f), Some(m)) => {
            let fm = LabelMask::new(read_intensity(f, "--fixed-mask")?, None)?;
            Some((fm, read_intensity(m, "--moving-mask")?))
        }
        (None, None) => None,
        (None, Some(_)) => return Err(config_err("missing required flag --fixed-mask")),
        (Some(_), None) => return Err(config_err("missing required flag --moving-mask")),
    };
    let landmarks = match (&job.fixed_landmarks, &job.moving_landmarks) {
        (Some(f), Some(m)) => {
            let lf = LandmarkSet::read(f, Frame::Fixed, Some(fixed.dims()))
                .map_err(|e| config_err(format!("--fixed-landmarks {}: {e}", f.display())))?;
            let lm = LandmarkSet::read(m, Frame::Moving, None)
                .map_err(|e| config_err(format!("--moving-landmarks {}: {e}", m.display())))?;
            Some((lf, lm))
        }
        (None, None) => None,
        (None, Some(_)) => return Err(config_err("missing required flag --fixed-landmarks")),
        (Some(_), None) => return Err(config_err("missing required flag --moving-landmarks")),
    };
    Ok(LoadedJob { ctx: PairContext::new(fixed, moving, global)?, masks, landmarks })
}

fn report_for(
    u: &DisplacementField,
    fixed: &Volume,
    masks: &Option<(LabelMask, Volume)>,
    landmarks: &Option<(LandmarkSet, LandmarkSet)>,
) -> CliResult<MetricsReport> {
    let warped_mask = match masks {
        Some((_, m)) => Some(LabelMask::new(warp_volume(m, u, Interpolation::Nearest)?, None)?),
        None => None,
    };
    let mask_pair = masks.as_ref().zip(warped_mask.as_ref()).map(|((f, _), w)| (f, w));
    let lm = landmarks.as_ref().map(|(f, m)| LandmarkPair { fixed: f, moving: m });
    Ok(evaluate(u, fixed.spacing(), mask_pair, lm, &DEFAULT_CPM_THRESHOLDS)?)
}

fn write_overlay(path: &Path, fixed: &Volume, warped: &Volume) -> CliResult<()> {
    let d = fixed.dims();
    let z = d[2] / 2;
    let (lo, hi) = fixed.range();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let to_u8 = |v: f64| ((v / span).clamp(0.0, 1.0) * 255.0).round() as u8;
    let img = image::GrayImage::from_fn((3 * d[0]) as u32, d[1] as u32, |px, py| {
        let (panel, x, y) = (px as usize / d[0], px as usize % d[0], py as usize);
        let (a, b) = (fixed.get(x, y, z), warped.get(x, y, z));
        image::Luma([match panel {
            0 => to_u8(a - lo),
            1 => to_u8(b - lo),
            _ => to_u8((a - b).abs()),
        }])
    });
    img.save(path).map_err(|e| CliError::Engine(Error::Io(std::io::Error::other(e.to_string()))))
}

fn dump_intermediates(dir: &Path, reg: &Registration) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let i = &reg.intermediates;
    if let Some((f, m)) = &i.global_features {
        io::write_features(dir.join("gf_fixed.gvol"), f)?;
        io::write_features(dir.join("gf_moving.gvol"), m)?;
    }
    if let Some((f, m)) = &i.local_features {
        io::write_features(dir.join("lf_fixed.gvol"), f)?;
        io::write_features(dir.join("lf_moving.gvol"), m)?;
    }
    for (name, u) in [("u_global", &i.u_global), ("u_local", &i.u_local), ("u_init", &i.u_init)] {
        if let Some(u) = u {
            io::write_field(dir.join(format!("{name}.gvol")), u)?;
        }
    }
    Ok(())
}

fn run_job(job: JobConfig, args: &RegisterArgs, cfg: &RegConfig) -> CliResult<()> {
    let job = job.with_bundle()?;
    let out = require(&job.out, "--out")?.clone();
    let mut loaded = load_job(&job, cfg, args.reg.embed_dim)?;
    let vae_init = match &args.vae_ckpt {
        Some(p) => Some(
            load_checkpoint(p)
                .map_err(|e| config_err(format!("--vae-ckpt {}: {e}", p.display())))?
                .0,
        ),
        None => None,
    };
    let reg = match loaded.ctx.register(cfg, vae_init.as_ref()) {
        Ok(r) => r,
        Err(e @ Error::NonFiniteLoss { .. }) => {
            if let (Error::NonFiniteLoss { trace, .. }, Some(p)) = (&e, &args.trace) {
                let _ = fs::write(p, trace);
            }
            return Err(e.into());
        }
        Err(e @ (Error::InvalidArgument(_) | Error::DimensionMismatch(_))) => return Err(config_err(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    fs::create_dir_all(&out)?;
    io::write_field(out.join("u.gvol"), &reg.u)?;
    io::write_volume(out.join("warped.gvol"), &reg.warped, Kind::Intensity)?;
    if let Some(p) = &args.trace {
        fs::write(p, trace_csv(&reg.trace)?)?;
    }
    if let Some(dir) = &args.dump_intermediate {
        dump_intermediates(dir, &reg)?;
    }
    if let Some(p) = &args.overlay {
        write_overlay(p, loaded.ctx.fixed(), &reg.warped)?;
    }
    if let (Some(p), Some(vae)) = (&args.save_vae, &reg.vae) {
        save_checkpoint(p, vae, &cfg.dimred)?;
    }
    if loaded.masks.is_some() || loaded.landmarks.is_some() {
        let r = report_for(&reg.u, loaded.ctx.fixed(), &loaded.masks, &loaded.landmarks)?;
        fs::write(out.join("report.json"), r.to_json()?)?;
    }
    log::info!(
        "registered into {}: loss {:.6} -> {:.6}",
        out.display(),
        reg.initial_loss,
        reg.final_loss
    );
    Ok(())
}

fn cmd_register(a: &RegisterArgs) -> CliResult<()> {
    let mut cfg = resolve_config(&a.reg)?;
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    if let Some(d) = a.dimred {
        cfg.dimred.method = d.into();
    }
    if let Some(manifest) = &a.manifest {
        let text = fs::read_to_string(manifest)
            .map_err(|e| config_err(format!("--manifest {}: {e}", manifest.display())))?;
        let jobs: Vec<JobConfig> =
            serde_json::from_str(&text).map_err(|e| config_err(format!("--manifest {}: {e}", manifest.display())))?;
        if a.jobs < 1 {
            return Err(config_err("--jobs must be >= 1"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(a.jobs)
            .build()
            .map_err(|e| config_err(format!("cannot start {} workers: {e}", a.jobs)))?;
        let results: Vec<CliResult<()>> = pool.install(|| jobs.into_par_iter().map(|j| run_job(j, a, &cfg)).collect());
        let mut worst: Option<CliError> = None;
        for r in results {
            if let Err(e) = r {
                eprintln!("job failed: {e}");
                if worst.as_ref().map_or(true, |w| e.exit_code() > w.exit_code()) {
                    worst = Some(e);
                }
            }
        }
        return worst.map_or(Ok(()), Err);
    }
    let job = JobConfig {
        fixed: a.fixed.clone(),
        moving: a.moving.clone(),
        global_features_fixed: a.global_features_fixed.clone(),
        global_features_moving: a.global_features_moving.clone(),
        mock_embeddings: a.mock_embeddings,
        fixed_mask: a.fixed_mask.clone(),
        moving_mask: a.moving_mask.clone(),
        fixed_landmarks: a.fixed_landmarks.clone(),
        moving_landmarks: a.moving_landmarks.clone(),
        bundle: a.bundle.clone(),
        out: a.out.clone(),
    };
    run_job(job, a, &cfg)
}

fn cmd_metrics(a: &MetricsArgs) -> CliResult<()> {
    let u = io::read_field(&a.field).map_err(|e| config_err(format!("--field {}: {e}", a.field.display())))?;
    let masks = match (&a.fixed_mask, &a.moving_mask) {
        (Some(f), Some(m)) => {
            let fixed = read_intensity(f, "--fixed-mask")?;
            Some((LabelMask::new(fixed, None).map_err(|e| config_err(e.to_string()))?, read_intensity(m, "--moving-mask")?))
        }
        (None, None) => None,
        (None, Some(_)) => return Err(config_err("missing required flag --fixed-mask")),
        (Some(_), None) => return Err(config_err("missing required flag --moving-mask")),
    };
    let landmarks = match (&a.fixed_landmarks, &a.moving_landmarks) {
        (Some(f), Some(m)) => Some((
            LandmarkSet::read(f, Frame::Fixed, Some(u.dims())).map_err(|e| config_err(e.to_string()))?,
            LandmarkSet::read(m, Frame::Moving, None).map_err(|e| config_err(e.to_string()))?,
        )),
        (None, None) => None,
        (None, Some(_)) => return Err(config_err("missing required flag --fixed-landmarks")),
        (Some(_), None) => return Err(config_err("missing required flag --moving-landmarks")),
    };
    let thresholds = a.thresholds.clone().unwrap_or_else(|| DEFAULT_CPM_THRESHOLDS.to_vec());
    let warped_mask = match &masks {
        Some((_, m)) => Some(LabelMask::new(warp_volume(m, &u, Interpolation::Nearest)?, None)?),
        None => None,
    };
    let mask_pair = masks.as_ref().zip(warped_mask.as_ref()).map(|((f, _), w)| (f, w));
    let lm = landmarks.as_ref().map(|(f, m)| LandmarkPair { fixed: f, moving: m });
    let spacing = u.spacing();
    let report = evaluate(&u, spacing, mask_pair, lm, &thresholds).map_err(|e| config_err(e.to_string()))?;
    let json = report.to_json()?;
    match &a.out {
        Some(p) => fs::write(p, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_err(format!("--spec {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config_err(format!("--spec {}: {e}", p.display())))?
        }
        None => {
            let mut s = SynthSpec::default();
            if let Some(seed) = env_seed()? {
                s.seed = seed;
            }
            s
        }
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(d) = &a.dims {
        spec.dims = [d[0], d[1], d[2]];
    }
    if let Some(v) = a.amplitude {
        spec.warp_amplitude = v;
    }
    if let Some(v) = a.frequency {
        spec.warp_frequency = v;
    }
    if let Some(t) = a.texture {
        spec.texture = match t {
            TextureArg::Blobs => Texture::Blobs,
            TextureArg::Bands => Texture::Bands,
            TextureArg::Checker => Texture::Checker,
        };
    }
    if let Some(v) = a.n_landmarks {
        spec.n_landmarks = v;
    }
    if let Some(v) = a.embed_dim {
        spec.embed_dim = v;
    }
    spec.validate().map_err(|e| config_err(e.to_string()))?;
    let pair = synth::make_pair(&spec)?;
    synth::write_bundle(&a.out, &spec, &pair)?;
    Ok(())
}

fn cmd_extract_mind(a: &ExtractMindArgs) -> CliResult<()> {
    let v = read_intensity(&a.input, "--in")?;
    let mut cfg = MindConfig::default();
    if let Some(r) = a.radius {
        cfg.radius = r;
    }
    if let Some(d) = a.dilation {
        cfg.dilation = d;
    }
    if let Some(e) = a.epsilon {
        cfg.epsilon = e;
    }
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    let f = extract_mind(&v, &cfg).map_err(|e| config_err(e.to_string()))?;
    io::write_features(&a.out, &f)?;
    Ok(())
}

/// The five ablation configurations, in report order.
pub fn ablation_configs(base: &RegConfig) -> Vec<(&'static str, RegConfig)> {
    let with = |mode: Mode, method: DimredMethod| {
        let mut c = base.clone();
        c.mode = mode;
        c.dimred.method = method;
        c
    };
    vec![
        ("pca", with(Mode::Glide, DimredMethod::Pca)),
        ("sdr", with(Mode::Glide, DimredMethod::Sdr)),
        ("ddr", with(Mode::Glide, DimredMethod::Ddr)),
        ("global_only", with(Mode::GlobalOnly, DimredMethod::Ddr)),
        ("local_only", with(Mode::LocalOnly, DimredMethod::Ddr)),
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub config: String,
    pub tre_mean_mm: Option<f64>,
    pub dsc_mean: Option<f64>,
    pub runtime_s: f64,
}

fn cmd_ablate(a: &AblateArgs) -> CliResult<()> {
    let base = resolve_config(&a.reg)?;
    let configs = ablation_configs(&base);
    let mut sums: BTreeMap<&str, (Vec<f64>, Vec<f64>, f64)> = BTreeMap::new();
    for dir in &a.bundle {
        let job = JobConfig { bundle: Some(dir.clone()), ..Default::default() }.with_bundle()?;
        let mut loaded = load_job(&job, &base, a.reg.embed_dim)?;
        for (name, cfg) in &configs {
            let t0 = Instant::now();
            let reg = loaded.ctx.register(cfg, None)?;
            let secs = t0.elapsed().as_secs_f64();
            let r = report_for(&reg.u, loaded.ctx.fixed(), &loaded.masks, &loaded.landmarks)?;
            let e = sums.entry(name).or_default();
            e.0.extend(r.tre_mean_mm);
            e.1.extend(r.dsc_mean);
            e.2 += secs;
        }
    }
    fs::create_dir_all(&a.out)?;
    let mut w = csv::Writer::from_path(a.out.join("ablation.csv")).map_err(Error::from)?;
    let mean = |v: &Vec<f64>| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    for (name, _) in &configs {
        let (tre, dsc, secs) = &sums[name];
        let row = AblationRow {
            config: name.to_string(),
            tre_mean_mm: mean(tre),
            dsc_mean: mean(dsc),
            runtime_s: secs / a.bundle.len() as f64,
        };
        w.serialize(&row).map_err(Error::from)?;
    }
    w.flush()?;
    Ok(())
}
