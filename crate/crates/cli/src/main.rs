use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Deserialize;

use stipple::density::DensityError;
use stipple::diffusion::{self, NoiseSchedule, SamplerConfig};
use stipple::metrics::{self, MetricsConfig, MetricsError, MetricsReport};
use stipple::model::{Denoiser, ModelError, ParamSet, Variant};
use stipple::stipplers::{self, write_atomic, StippleError, WvsConfig};
use stipple::training::{self, Adam, StepLog, TrainConfig, TrainError, TrainItem};
use stipple::transport::{self, TransportError};
use stipple::{DensityMap, DensitySpec, GrayImage, PointSet};

#[derive(Parser)]
#[command(name = "stipple", version, about = "Capacity-constrained stippling by diffusion over OT grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a stipple for a density.
    Gen(GenArgs),
    /// Evaluate stipples against a density and write a JSON report.
    Eval(EvalArgs),
    /// Draw a stipple as PNG or SVG.
    Render(RenderArgs),
    /// Build a training dataset of WVS targets.
    Dataset(DatasetArgs),
    /// Train the base U-Net or a control branch.
    Train(TrainArgs),
    /// Compare methods over a directory of density images.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Wvs,
    Reject,
    Diffusion,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Wvs => "wvs",
            Method::Reject => "reject",
            Method::Diffusion => "diffusion",
        }
    }
}

#[derive(Args, Clone, Debug)]
struct DiffusionArgs {
    /// Timestep the sampler starts from.
    #[arg(long, default_value_t = 300)]
    t_start: usize,
    /// Denoising attempts per timestep (resampling jumps).
    #[arg(long, default_value_t = 2)]
    jumps: usize,
    /// Single attempt per timestep; overrides --jumps.
    #[arg(long)]
    no_resample: bool,
    /// Plain zero convolutions instead of gated injections.
    #[arg(long)]
    no_gating: bool,
    /// Zero-fill the image-feature channels of the condition.
    #[arg(long)]
    no_gecco: bool,
    /// Start from pure noise at the last timestep instead of a noised
    /// rejection-sampled prior.
    #[arg(long)]
    from_pure_noise: bool,
    /// Base U-Net checkpoint.
    #[arg(long, default_value = "checkpoints/base.sdck")]
    base: PathBuf,
    /// Control-branch checkpoint; defaults to checkpoints/control-<variant>.sdck.
    #[arg(long)]
    control: Option<PathBuf>,
}

impl DiffusionArgs {
    fn variant(&self) -> Variant {
        Variant { gating: !self.no_gating, features: !self.no_gecco }
    }

    fn control_path(&self) -> PathBuf {
        self.control.clone().unwrap_or_else(|| PathBuf::from(format!("checkpoints/control-{}.sdck", self.variant().name())))
    }

    fn sampler(&self, seed: u64, schedule: &NoiseSchedule) -> SamplerConfig {
        let jumps = if self.no_resample { 1 } else { self.jumps };
        if self.from_pure_noise {
            SamplerConfig { t_start: schedule.steps(), jumps, seed, pure_noise: true, stochastic: true }
        } else {
            SamplerConfig { t_start: self.t_start, jumps, seed, pure_noise: false, stochastic: true }
        }
    }

    fn load(&self) -> Result<Denoiser<f32>, CliError> {
        for p in [&self.base, &self.control_path()] {
            if !p.exists() {
                return Err(CliError::Missing(format!("checkpoint {} not found", p.display())));
            }
        }
        Ok(Denoiser::load(&self.base, Some(&self.control_path()), Some(self.variant()))?)
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    method: Method,
    /// Grayscale image (PGM or PNG, dark is dense) or analytic:{quadratic|stress|stress-unit|uniform}.
    #[arg(long)]
    density: String,
    /// Point budget; must be a perfect square.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV.
    #[arg(long, default_value = "points.csv")]
    out: PathBuf,
    /// Lloyd iteration cap for --method wvs.
    #[arg(long, default_value_t = stipplers::DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[command(flatten)]
    diffusion: DiffusionArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Stipple CSV files, all evaluated against the same density.
    #[arg(long, num_args = 0..)]
    points: Vec<PathBuf>,
    #[arg(long)]
    density: String,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Method label stored in the report.
    #[arg(long, default_value = "points")]
    method: String,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    points: PathBuf,
    /// Output file; the extension selects PNG or SVG.
    #[arg(long)]
    out: PathBuf,
    /// Image side in pixels.
    #[arg(long, default_value_t = 512)]
    size: usize,
    /// Dot radius in pixels.
    #[arg(long, default_value_t = 2.0)]
    dot_radius: f64,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Uniform density for every pair (base-model data).
    #[arg(long)]
    uniform: bool,
    #[arg(long, default_value_t = stipplers::DEFAULT_MAX_ITERS)]
    max_iters: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Stage {
    Base,
    Control,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(value_enum)]
    stage: Stage,
    /// JSON training config.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Directory of density images (PGM or PNG).
    #[arg(long)]
    densities: PathBuf,
    #[arg(long)]
    n: usize,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "wvs,reject")]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "compare.csv")]
    out: PathBuf,
    #[command(flatten)]
    diffusion: DiffusionArgs,
}

/// Training job description read from `--config`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    dataset: PathBuf,
    out: PathBuf,
    /// Base checkpoint; required for control training.
    base: Option<PathBuf>,
    #[serde(default = "default_variant")]
    variant: String,
    log: Option<PathBuf>,
    #[serde(default)]
    resume: bool,
    #[serde(default = "default_every")]
    checkpoint_every: usize,
    /// Defaults to the full schedule for the base stage and 300 otherwise.
    t_trunc: Option<usize>,
    gamma: Option<f64>,
    batch: Option<usize>,
    lr: Option<f64>,
    steps: Option<usize>,
    seed: Option<u64>,
    init_seed: Option<u64>,
}

fn default_variant() -> String {
    "full".into()
}

fn default_every() -> usize {
    500
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Missing(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(e.to_string())
        } else {
            CliError::Other(e.to_string())
        }
    }
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::NotSquare { .. } => CliError::Usage(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<DensityError> for CliError {
    fn from(e: DensityError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::SinkhornDiverged { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(io) => io.into(),
            ModelError::Variant { .. } => CliError::Usage(e.to_string()),
            ModelError::Density(d) => d.into(),
            ModelError::Transport(t) => t.into(),
            ModelError::Sampling(s) => s.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite(_) => CliError::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::EmptyDataset => CliError::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<StippleError> for CliError {
    fn from(e: StippleError) -> Self {
        match e {
            StippleError::Io(io) => io.into(),
            StippleError::Transport(t) => t.into(),
            StippleError::Density(d) => d.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<diffusion::DiffusionError> for CliError {
    fn from(e: diffusion::DiffusionError) -> Self {
        match e {
            diffusion::DiffusionError::Config(_) | diffusion::DiffusionError::Timestep { .. } => CliError::Usage(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<stipple::image::ImageError> for CliError {
    fn from(e: stipple::image::ImageError) -> Self {
        match e {
            stipple::image::ImageError::Io(io) => io.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

/// Rendering resolution for analytic densities.
const ANALYTIC_RESOLUTION: usize = 1024;

fn load_density(arg: &str) -> Result<DensityMap, CliError> {
    if let Some(name) = arg.strip_prefix("analytic:") {
        let spec = match name {
            "quadratic" => DensitySpec::Quadratic,
            "stress" => DensitySpec::Stress { frame: stipple::density::StressFrame::Centered },
            "stress-unit" => DensitySpec::Stress { frame: stipple::density::StressFrame::Unit },
            "uniform" => DensitySpec::Uniform,
            other => return Err(CliError::Usage(format!("unknown analytic density {other:?}"))),
        };
        return Ok(spec.render(ANALYTIC_RESOLUTION)?);
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(CliError::Missing(format!("density {arg} not found")));
    }
    Ok(DensityMap::from_grayscale(&GrayImage::load(path)?, true)?)
}

fn read_points(path: &Path) -> Result<PointSet, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::from(e).with_context(path))?;
    PointSet::from_csv(std::io::BufReader::new(f)).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

impl CliError {
    fn with_context(self, path: &Path) -> Self {
        match self {
            CliError::Missing(m) => CliError::Missing(format!("{}: {m}", path.display())),
            CliError::Other(m) => CliError::Other(format!("{}: {m}", path.display())),
            e => e,
        }
    }
}

/// Generates one stipple. `denoiser` is required for the diffusion method.
fn generate(
    method: Method,
    density: &DensityMap,
    n: usize,
    seed: u64,
    max_iters: usize,
    diff: &DiffusionArgs,
    denoiser: Option<&Denoiser<f32>>,
) -> Result<PointSet, CliError> {
    transport::grid_side(n)?;
    Ok(match method {
        Method::Wvs => {
            let cfg = WvsConfig { max_iters, ..WvsConfig::default() };
            stipplers::wvs_with(density, n, seed, &cfg)?
        }
        Method::Reject => stipplers::rejection(density, n, seed)?,
        Method::Diffusion => {
            let d = denoiser.expect("diffusion needs a loaded denoiser");
            d.stipple(density, n, &diff.sampler(seed, &NoiseSchedule::default()))?
        }
    })
}

fn cmd_gen(a: GenArgs) -> Result<(), CliError> {
    transport::grid_side(a.n)?;
    let density = load_density(&a.density)?;
    let denoiser = if a.method == Method::Diffusion { Some(a.diffusion.load()?) } else { None };
    let points = generate(a.method, &density, a.n, a.seed, a.max_iters, &a.diffusion, denoiser.as_ref())?;
    write_atomic(&a.out, points.to_csv().as_bytes())?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    if a.points.is_empty() {
        return Err(CliError::Usage("eval needs at least one --points file".into()));
    }
    let density = load_density(&a.density)?;
    let stipples = a.points.iter().map(|p| read_points(p)).collect::<Result<Vec<_>, _>>()?;
    let densities = vec![density; stipples.len()];
    let report = metrics::evaluate_set(&a.method, &stipples, &densities, &MetricsConfig::default())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?;
    write_atomic(&a.out, json.as_bytes())?;
    Ok(())
}

/// Pixels whose centre lies within `radius` of a point, plus the pixel
/// containing it.
fn render_png(points: &PointSet, size: usize, radius: f64) -> GrayImage {
    let mut pixels = vec![255u8; size * size];
    let s = size as f64;
    for p in points.iter() {
        let (cx, cy) = (p[0] * s, p[1] * s);
        let (px, py) = ((cx as usize).min(size - 1), (cy as usize).min(size - 1));
        pixels[py * size + px] = 0;
        let r = radius.ceil() as isize + 1;
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (px as isize + dx, py as isize + dy);
                if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
                    continue;
                }
                let (qx, qy) = (x as f64 + 0.5, y as f64 + 0.5);
                if (qx - cx).powi(2) + (qy - cy).powi(2) <= radius * radius {
                    pixels[y as usize * size + x as usize] = 0;
                }
            }
        }
    }
    GrayImage::new(size, size, pixels).expect("buffer matches size")
}

fn render_svg(points: &PointSet, size: usize, radius: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#);
    let _ = writeln!(out, r#"<rect width="{size}" height="{size}" fill="white"/>"#);
    let s = size as f64;
    for p in points.iter() {
        let _ = writeln!(out, r#"<circle cx="{:.3}" cy="{:.3}" r="{radius}" fill="black"/>"#, p[0] * s, p[1] * s);
    }
    out.push_str("</svg>\n");
    out
}

fn cmd_render(a: RenderArgs) -> Result<(), CliError> {
    if a.size == 0 || !(a.dot_radius > 0.0) {
        return Err(CliError::Usage("--size and --dot-radius must be positive".into()));
    }
    let points = read_points(&a.points)?;
    let ext = a.out.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("svg") => render_svg(&points, a.size, a.dot_radius).into_bytes(),
        Some("png") => {
            let mut buf = Vec::new();
            render_png(&points, a.size, a.dot_radius).write_png(&mut buf)?;
            buf
        }
        _ => return Err(CliError::Usage(format!("{}: output must end in .png or .svg", a.out.display()))),
    };
    write_atomic(&a.out, &bytes)?;
    Ok(())
}

fn cmd_dataset(a: DatasetArgs) -> Result<(), CliError> {
    transport::grid_side(a.n)?;
    let specs = if a.uniform { vec![DensitySpec::Uniform; a.count] } else { DensitySpec::random_set(a.count, a.seed) };
    let cfg = WvsConfig { max_iters: a.max_iters, ..WvsConfig::default() };
    stipplers::generate_dataset(&a.out, &specs, a.n, a.seed, &cfg)?;
    Ok(())
}

fn opt_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".opt");
    PathBuf::from(s)
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.config).map_err(|e| CliError::from(e).with_context(&a.config))?;
    let job: TrainFile = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", a.config.display())))?;
    let schedule = NoiseSchedule::default();
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        t_trunc: job.t_trunc.unwrap_or(if a.stage == Stage::Base { schedule.steps() } else { defaults.t_trunc }),
        gamma: job.gamma.unwrap_or(defaults.gamma),
        batch: job.batch.unwrap_or(defaults.batch),
        lr: job.lr.unwrap_or(defaults.lr),
        steps: job.steps.unwrap_or(defaults.steps),
        seed: job.seed.unwrap_or(defaults.seed),
    };
    if !job.dataset.join("manifest.json").exists() {
        return Err(CliError::Missing(format!("dataset {} has no manifest.json", job.dataset.display())));
    }
    let (_, items) = stipplers::read_dataset(&job.dataset)?;
    let data: Vec<TrainItem<f32>> = items.iter().map(TrainItem::from_dataset).collect();

    let base = match a.stage {
        Stage::Base => None,
        Stage::Control => {
            let path = job.base.as_ref().ok_or_else(|| CliError::Usage("control training needs \"base\"".into()))?;
            if !path.exists() {
                return Err(CliError::Missing(format!("base checkpoint {} not found", path.display())));
            }
            Some(ParamSet::<f32>::load(path)?)
        }
    };
    let init_seed = job.init_seed.unwrap_or(cfg.seed);
    let opt_file = opt_path(&job.out);
    let resuming = job.resume && job.out.exists() && opt_file.exists();
    let (mut params, mut opt) = if resuming {
        (ParamSet::<f32>::load(&job.out)?, Adam::<f32>::load(&opt_file)?)
    } else {
        let p = match &base {
            None => stipple::model::init_base(init_seed),
            Some(b) => {
                let v = Variant::from_name(&job.variant)
                    .ok_or_else(|| CliError::Usage(format!("unknown variant {:?}", job.variant)))?;
                stipple::model::init_control(b, v, init_seed)?
            }
        };
        (p, Adam::new(cfg.lr))
    };

    let mut log = match &job.log {
        Some(p) => Some(fs::OpenOptions::new().create(true).append(resuming).write(true).truncate(!resuming).open(p)?),
        None => None,
    };
    let every = job.checkpoint_every.max(1);
    let out = job.out.clone();
    let mut on_step = |s: &StepLog, p: &ParamSet<f32>, o: &Adam<f32>| -> Result<(), TrainError> {
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(s).expect("log record serializes");
            writeln!(f, "{line}").map_err(ModelError::from)?;
        }
        if s.step % every == 0 || s.step == cfg.steps {
            p.save(&out)?;
            o.save(&opt_path(&out))?;
        }
        Ok(())
    };
    match &base {
        None => training::train_base(&mut params, &mut opt, &data, &cfg, &schedule, &mut on_step)?,
        Some(b) => training::train_control(b, &mut params, &mut opt, &data, &cfg, &schedule, &mut on_step)?,
    }
    if opt.step == 0 || !job.out.exists() {
        params.save(&job.out)?;
        opt.save(&opt_file)?;
    }
    Ok(())
}

fn list_densities(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::from(e).with_context(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no .pgm or .png densities in {}", dir.display())));
    }
    Ok(files)
}

fn cmd_compare(a: CompareArgs) -> Result<(), CliError> {
    transport::grid_side(a.n)?;
    let files = list_densities(&a.densities)?;
    let densities = files
        .iter()
        .map(|f| load_density(f.to_str().ok_or_else(|| CliError::Usage(format!("non-UTF-8 path {}", f.display())))?))
        .collect::<Result<Vec<_>, _>>()?;
    let denoiser = if a.methods.contains(&Method::Diffusion) { Some(a.diffusion.load()?) } else { None };
    let mut csv = MetricsReport::csv_header();
    csv.push('\n');
    for &method in &a.methods {
        let stipples = densities
            .par_iter()
            .enumerate()
            .map(|(i, d)| {
                generate(method, d, a.n, a.seed + i as u64, stipplers::DEFAULT_MAX_ITERS, &a.diffusion, denoiser.as_ref())
            })
            .collect::<Result<Vec<_>, _>>()?;
        let report = metrics::evaluate_set(method.name(), &stipples, &densities, &MetricsConfig::default())?;
        csv.push_str(&report.csv_row());
        csv.push('\n');
    }
    write_atomic(&a.out, csv.as_bytes())?;
    Ok(())
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("STIPPLE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Usage(format!("STIPPLE_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Other(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(a) => cmd_render(a),
        Command::Dataset(a) => cmd_dataset(a),
        Command::Train(a) => cmd_train(a),
        Command::Compare(a) => cmd_compare(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
