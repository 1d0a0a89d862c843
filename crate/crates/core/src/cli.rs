//! Command-line entry point.
//!
//! Every subcommand prints a versioned report on stdout (JSON or aligned
//! text) and, on failure, a JSON error object on stderr with a category
//! that determines the exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::embed_pool::{self, ChainMeanMode, MinMaxMode, PoolError, PoolOptions, SoftmaxAxis};
use crate::map_io::{self, DensityMap, GridGeometry, MapError};
use crate::map_sim::{self, SimError};
use crate::metrics::{self, CcOptions, MetricError};
use crate::nn::{self, ModelConfig, NnError, Unet};
use crate::pipeline::{self, PipelineError, ToyTrainConfig};
use crate::structure_io::{self, PdbError};
use crate::volume_prep::{self, CubeBatch, PrepError, TileConfig, TilePlan};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Failure classes and their process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Internal,
    Input,
    Config,
    Numeric,
    Usage,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Internal => 1,
            Category::Input => 2,
            Category::Config => 3,
            Category::Numeric => 4,
            Category::Usage => 64,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    fn new(category: Category, message: impl Into<String>) -> Self {
        CliError { category, message: message.into() }
    }

    fn input(message: impl Into<String>) -> Self {
        Self::new(Category::Input, message)
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new(Category::Config, message)
    }

    fn to_json(&self) -> Value {
        json!({
            "error": {
                "category": self.category,
                "exit_code": self.category.exit_code(),
                "message": self.message,
            }
        })
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.category, self.message)
    }
}

impl From<MapError> for CliError {
    fn from(e: MapError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<PdbError> for CliError {
    fn from(e: PdbError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<PoolError> for CliError {
    fn from(e: PoolError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let cat = match e {
            SimError::BadResolution(_) | SimError::BadGridInterval(_) => Category::Config,
            _ => Category::Input,
        };
        CliError::new(cat, e.to_string())
    }
}

impl From<PrepError> for CliError {
    fn from(e: PrepError) -> Self {
        let cat = match e {
            PrepError::NonPositiveScale(_) => Category::Numeric,
            PrepError::Config(_) => Category::Config,
            _ => Category::Input,
        };
        CliError::new(cat, e.to_string())
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        let cat = match e {
            NnError::NonFiniteLoss(..) => Category::Numeric,
            NnError::Config(_) | NnError::ParamMismatch { .. } => Category::Config,
            NnError::Shape(_) => Category::Internal,
            _ => Category::Input,
        };
        CliError::new(cat, e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        let cat = match e {
            MetricError::ZeroVariance(_) | MetricError::TooFewPoints(_) => Category::Numeric,
            MetricError::Invalid(_) => Category::Config,
            MetricError::Sim(s) => return s.into(),
            _ => Category::Input,
        };
        CliError::new(cat, e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Map(e) => e.into(),
            PipelineError::Prep(e) => e.into(),
            PipelineError::Nn(e) => e.into(),
            PipelineError::Sim(e) => e.into(),
            PipelineError::Pdb(e) => e.into(),
        }
    }
}

/// Settings that can come from a TOML file; flags override them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub resolution: f64,
    pub grid_interval: f64,
    pub embed_len: usize,
    pub cube_size: usize,
    pub core_size: usize,
    pub model: ModelConfig,
    pub toy_model: ModelConfig,
    pub train: ToyTrainConfig,
    pub metrics: CcOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            resolution: 2.0,
            grid_interval: 1.0,
            embed_len: embed_pool::DEFAULT_EMBED_LEN,
            cube_size: volume_prep::CUBE_SIZE,
            core_size: volume_prep::CORE_SIZE,
            model: ModelConfig::default(),
            toy_model: ModelConfig::toy(),
            train: ToyTrainConfig::default(),
            metrics: CcOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        map_sim::derive_params(self.resolution)?.with_grid_interval(self.grid_interval)?;
        if self.embed_len == 0 {
            return Err(CliError::config("embed_len must be positive"));
        }
        TileConfig { cube_size: self.cube_size, core_size: self.core_size }.validate()?;
        self.model.validate()?;
        self.toy_model.validate()?;
        if self.train.clip <= 0.0 || self.train.base_lr < 0.0 {
            return Err(CliError::config("train.clip must be positive and train.base_lr non-negative"));
        }
        let m = &self.metrics;
        if !(m.peak_fraction > 0.0 && m.peak_fraction <= 1.0) || m.atom_volume <= 0.0 || m.cutoff_radius <= 0.0 {
            return Err(CliError::config(format!("invalid metric options {m:?}")));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, Parser)]
#[command(name = "cryomap", version, about = "Cryo-EM map simulation, enhancement and evaluation")]
struct Cli {
    /// TOML file with pipeline settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    Row,
    Column,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MeanArg {
    Padded,
    TrueLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MinMaxArg {
    Global,
    PerFeature,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a density map from a PDB file.
    Simulate {
        #[arg(long)]
        pdb: PathBuf,
        #[arg(long)]
        resolution: Option<f64>,
        /// Grid interval, Å.
        #[arg(long)]
        grid: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Use the grid of an existing map.
        #[arg(long, conflicts_with = "dims")]
        like: Option<PathBuf>,
        /// Explicit grid size NX,NY,NZ centred on the structure.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        /// Gaussian noise standard deviation as a fraction of the peak density.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Pool per-chain residue embeddings into a fixed-length matrix.
    Pool {
        /// Raw little-endian float32 blob.
        #[arg(long, requires = "manifest", conflicts_with = "npy")]
        emb: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// C × R × d NPY array.
        #[arg(long)]
        npy: Option<PathBuf>,
        #[arg(long = "L")]
        len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = AxisArg::Row)]
        softmax_axis: AxisArg,
        #[arg(long, value_enum, default_value_t = MeanArg::Padded)]
        chain_mean: MeanArg,
        #[arg(long, value_enum, default_value_t = MinMaxArg::Global)]
        minmax: MinMaxArg,
    },
    /// Cut a map into network cubes.
    Tile {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Resample to 1 Å and normalize before tiling.
        #[arg(long)]
        prep: bool,
    },
    /// Reassemble cubes written by `tile`.
    Stitch {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        cubes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the network over a map.
    Enhance {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overfit the toy network on one synthetic pair.
    TrainToy {
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f32>,
        /// Directory to save the trained weights.
        #[arg(long)]
        save_weights: Option<PathBuf>,
    },
    /// Write randomly initialized weights.
    InitWeights {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        base_channels: Option<usize>,
    },
    /// Real-space correlations between two maps.
    EvalCc {
        #[arg(long)]
        map: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        pdb: Option<PathBuf>,
    },
    /// Fourier shell correlation between two maps.
    EvalFsc {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Per-residue correlation against a structure.
    EvalRscc {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        pdb: PathBuf,
        #[arg(long)]
        resolution: Option<f64>,
        /// Map whose scores count as the baseline for the improvement fraction.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

/// A finished subcommand: JSON body plus its text rendering.
struct Report {
    json: Value,
    text: String,
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => Category::Usage.exit_code(),
            };
            let _ = e.print();
            return code;
        }
    };
    init_logging(&cli.log_level);
    let format = cli.format;
    match execute(cli) {
        Ok(r) => {
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&r.json).expect("report serializes")),
                Format::Text => print!("{}", r.text),
            }
            0
        }
        Err(e) => {
            log::error!("{}", e.message);
            eprintln!("{}", e.to_json());
            e.category.exit_code()
        }
    }
}

fn init_logging(level: &str) {
    let env = env_logger::Env::default().default_filter_or(level);
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).is_test(false).try_init();
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    let Some(path) = path else { return Ok(PipelineConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn checksum(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn log_inputs(paths: &[&Path]) -> Result<(), CliError> {
    for p in paths {
        let sum = checksum(p)?;
        log::info!("input {} sha256={sum}", p.display());
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<Report, CliError> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let mut overrides = Vec::new();
    if let Some(s) = cli.seed {
        cfg.seed = s;
        overrides.push("seed");
    }
    // Subcommand flags that shadow config entries.
    match &cli.command {
        Command::Simulate { resolution, grid, .. } => {
            if let Some(r) = resolution {
                cfg.resolution = *r;
                overrides.push("resolution");
            }
            if let Some(g) = grid {
                cfg.grid_interval = *g;
                overrides.push("grid_interval");
            }
        }
        Command::EvalRscc { resolution: Some(r), .. } => {
            cfg.resolution = *r;
            overrides.push("resolution");
        }
        Command::Pool { len: Some(l), .. } => {
            cfg.embed_len = *l;
            overrides.push("embed_len");
        }
        Command::TrainToy { steps, lr, .. } => {
            if let Some(s) = steps {
                cfg.train.steps = *s;
                overrides.push("train.steps");
            }
            if let Some(l) = lr {
                cfg.train.base_lr = *l;
                overrides.push("train.base_lr");
            }
        }
        Command::InitWeights { base_channels: Some(b), .. } => {
            cfg.model.base_channels = *b;
            overrides.push("model.base_channels");
        }
        _ => {}
    }
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::config("--threads must be at least 1"));
        }
        log::info!("thread cap {t}");
    }
    cfg.validate()?;
    let source = cli.config.as_ref().map_or("defaults".to_string(), |p| p.display().to_string());
    log::info!(
        "config source={source} overrides=[{}] seed={} hash={}",
        overrides.join(","),
        cfg.seed,
        cfg.hash()
    );
    match cli.command {
        Command::Simulate { pdb, out, like, dims, noise, .. } => simulate(&cfg, &pdb, &out, like.as_deref(), dims, noise),
        Command::Pool { emb, manifest, npy, out, softmax_axis, chain_mean, minmax, .. } => {
            pool(&cfg, emb.as_deref(), manifest.as_deref(), npy.as_deref(), &out, softmax_axis, chain_mean, minmax)
        }
        Command::Tile { input, out_dir, prep } => tile(&cfg, &input, &out_dir, prep),
        Command::Stitch { plan, cubes, out } => stitch(&plan, &cubes, &out),
        Command::Enhance { input, weights, out } => enhance(&input, &weights, &out),
        Command::TrainToy { save_weights, .. } => train_toy(&cfg, save_weights.as_deref()),
        Command::InitWeights { out, .. } => init_weights(&cfg, &out),
        Command::EvalCc { map, reference, pdb } => eval_cc(&cfg, &map, &reference, pdb.as_deref()),
        Command::EvalFsc { a, b } => eval_fsc(&a, &b),
        Command::EvalRscc { map, pdb, baseline, .. } => eval_rscc(&cfg, &map, &pdb, baseline.as_deref()),
    }
}

fn base_report(command: &str) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("schema_version".into(), json!(REPORT_SCHEMA_VERSION));
    m.insert("command".into(), json!(command));
    m
}

/// Renders `key value` lines with the values aligned.
fn kv_text(pairs: &[(&str, String)]) -> String {
    let w = pairs.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k:<w$}  {v}");
    }
    s
}

fn fmt3(v: [f64; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn dims3(v: [usize; 3]) -> String {
    format!("{}x{}x{}", v[0], v[1], v[2])
}

/// Cubic-ish grid of the requested size centred on the structure, with the
/// origin on a multiple of the grid interval.
fn centred_grid(s: &structure_io::ProteinStructure, dims: [usize; 3], g: f64) -> Result<GridGeometry, CliError> {
    let (lo, hi) = s.bounds().ok_or_else(|| CliError::input("structure has no atoms"))?;
    let mut origin = [0.0; 3];
    for a in 0..3 {
        let centre = 0.5 * (lo[a] + hi[a]);
        origin[a] = ((centre - 0.5 * (dims[a] as f64 - 1.0) * g) / g).round() * g;
    }
    Ok(GridGeometry { dims, voxel_size: [g; 3], origin })
}

fn simulate(
    cfg: &PipelineConfig,
    pdb: &Path,
    out: &Path,
    like: Option<&Path>,
    dims: Option<Vec<usize>>,
    noise: f64,
) -> Result<Report, CliError> {
    if let Some(d) = &dims {
        if d.len() != 3 || d.contains(&0) {
            return Err(CliError::new(Category::Usage, "--dims takes three positive integers NX,NY,NZ"));
        }
    }
    log_inputs(&[pdb])?;
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(CliError::config(format!("noise {noise} must be non-negative")));
    }
    let s = structure_io::read_pdb(pdb)?;
    let params = map_sim::derive_params(cfg.resolution)?.with_grid_interval(cfg.grid_interval)?;
    let grid = match (like, dims) {
        (Some(p), _) => {
            log_inputs(&[p])?;
            Some(map_io::read_mrc(p)?.geometry())
        }
        (None, Some(d)) => Some(centred_grid(&s, [d[0], d[1], d[2]], cfg.grid_interval)?),
        (None, None) => None,
    };
    let mut sim = map_sim::simulate_map(&s, &params, grid.as_ref())?;
    if noise > 0.0 {
        let peak = sim.map.data.iter().cloned().fold(0.0f32, f32::max) as f64;
        let dist = Normal::new(0.0, noise * peak).map_err(|e| CliError::config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        sim.map.data.iter_mut().for_each(|v| *v += dist.sample(&mut rng) as f32);
    }
    map_io::write_mrc(&sim.map, out)?;
    let m = &sim.map;
    let mut r = base_report("simulate");
    r.insert("out".into(), json!(out.display().to_string()));
    r.insert("dims".into(), json!(m.dims));
    r.insert("voxel_size".into(), json!(m.voxel_size));
    r.insert("origin".into(), json!(m.origin));
    r.insert("atoms".into(), json!(s.atom_count()));
    r.insert("params".into(), json!(params));
    r.insert("noise".into(), json!(noise));
    let text = kv_text(&[
        ("out", out.display().to_string()),
        ("dims", dims3(m.dims)),
        ("voxel_size", fmt3(m.voxel_size)),
        ("atoms", s.atom_count().to_string()),
        ("resolution", params.resolution.to_string()),
    ]);
    Ok(Report { json: Value::Object(r), text })
}

#[allow(clippy::too_many_arguments)]
fn pool(
    cfg: &PipelineConfig,
    emb: Option<&Path>,
    manifest: Option<&Path>,
    npy: Option<&Path>,
    out: &Path,
    axis: AxisArg,
    mean: MeanArg,
    minmax: MinMaxArg,
) -> Result<Report, CliError> {
    let set = match (emb, manifest, npy) {
        (Some(b), Some(m), None) => {
            log_inputs(&[b, m])?;
            embed_pool::read_embedding_blob(b, m)?
        }
        (None, None, Some(n)) => {
            log_inputs(&[n])?;
            embed_pool::read_embedding_npy(n)?
        }
        _ => return Err(CliError::new(Category::Usage, "give either --emb with --manifest, or --npy")),
    };
    let opts = PoolOptions {
        target_len: cfg.embed_len,
        chain_mean: match mean {
            MeanArg::Padded => ChainMeanMode::Padded,
            MeanArg::TrueLength => ChainMeanMode::TrueLength,
        },
        min_max: match minmax {
            MinMaxArg::Global => MinMaxMode::Global,
            MinMaxArg::PerFeature => MinMaxMode::PerFeature,
        },
        softmax_axis: match axis {
            AxisArg::Row => SoftmaxAxis::Row,
            AxisArg::Column => SoftmaxAxis::Column,
        },
    };
    let (cw, pooled) = embed_pool::pool(&set, &opts)?;
    let fin = &pooled.final_embedding;
    let bytes = embed_pool::encode_f32_le(fin.data.iter().map(|&v| v as f32));
    fs::write(out, bytes).map_err(|e| CliError::input(format!("{}: {e}", out.display())))?;
    let mut r = base_report("pool");
    r.insert("out".into(), json!(out.display().to_string()));
    r.insert("rows".into(), json!(fin.rows));
    r.insert("d".into(), json!(fin.cols));
    r.insert("dtype".into(), json!("float32"));
    r.insert("chain_weights".into(), json!(cw.weights));
    r.insert("selection_map".into(), json!(pooled.selection_map));
    let sidecar = out.with_extension("json");
    let body = Value::Object(r.clone());
    fs::write(&sidecar, serde_json::to_string_pretty(&body).expect("serializes"))
        .map_err(|e| CliError::input(format!("{}: {e}", sidecar.display())))?;
    let text = kv_text(&[
        ("out", out.display().to_string()),
        ("rows", fin.rows.to_string()),
        ("d", fin.cols.to_string()),
        ("chains", cw.weights.len().to_string()),
        ("chain_weights", format!("{:?}", cw.weights)),
    ]);
    Ok(Report { json: body, text })
}

/// `plan.json` written by `tile`.
#[derive(Debug, Serialize, Deserialize)]
struct TileManifest {
    schema_version: u32,
    geometry: GridGeometry,
    plan: TilePlan,
    cubes: Vec<String>,
}

fn cube_name(i: usize) -> String {
    format!("cube_{i:05}.mrc")
}

fn tile(cfg: &PipelineConfig, input: &Path, out_dir: &Path, prep: bool) -> Result<Report, CliError> {
    log_inputs(&[input])?;
    let mut map = map_io::read_mrc(input)?;
    let mut scale = None;
    if prep {
        map = volume_prep::resample(&map, pipeline::WORKING_VOXEL)?;
        let (m, s) = volume_prep::normalize(&map)?;
        map = m;
        scale = Some(s);
    }
    let plan = volume_prep::make_plan_with(map.dims, &TileConfig { cube_size: cfg.cube_size, core_size: cfg.core_size })?;
    let batch = volume_prep::partition(&map, &plan)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::input(format!("{}: {e}", out_dir.display())))?;
    let s = plan.cube_size;
    let mut names = Vec::with_capacity(plan.len());
    for (i, cube) in batch.cubes.iter().enumerate() {
        let o = plan.cube_origins[i];
        let origin: [f64; 3] = std::array::from_fn(|a| map.origin[a] + (o[a] as f64 - plan.pad as f64) * map.voxel_size[a]);
        let g = GridGeometry { dims: [s; 3], voxel_size: map.voxel_size, origin };
        let cm = DensityMap::from_geometry(g, cube.clone())?;
        let name = cube_name(i);
        map_io::write_mrc(&cm, out_dir.join(&name))?;
        names.push(name);
    }
    let manifest = TileManifest { schema_version: REPORT_SCHEMA_VERSION, geometry: map.geometry(), plan: plan.clone(), cubes: names };
    let plan_path = out_dir.join("plan.json");
    fs::write(&plan_path, serde_json::to_string_pretty(&manifest).expect("serializes"))
        .map_err(|e| CliError::input(format!("{}: {e}", plan_path.display())))?;
    let mut r = base_report("tile");
    r.insert("plan".into(), json!(plan_path.display().to_string()));
    r.insert("cubes".into(), json!(plan.len()));
    r.insert("dims".into(), json!(map.dims));
    r.insert("padded_dims".into(), json!(plan.padded_dims));
    r.insert("scale".into(), json!(scale));
    let text = kv_text(&[
        ("plan", plan_path.display().to_string()),
        ("cubes", plan.len().to_string()),
        ("dims", dims3(map.dims)),
    ]);
    Ok(Report { json: Value::Object(r), text })
}

fn stitch(plan_path: &Path, cube_dir: &Path, out: &Path) -> Result<Report, CliError> {
    log_inputs(&[plan_path])?;
    let text = fs::read_to_string(plan_path).map_err(|e| CliError::input(format!("{}: {e}", plan_path.display())))?;
    let manifest: TileManifest =
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", plan_path.display())))?;
    let plan = &manifest.plan;
    let s = plan.cube_size;
    let mut cubes = Vec::with_capacity(plan.len());
    for i in 0..plan.len() {
        let p = cube_dir.join(cube_name(i));
        if !p.is_file() {
            return Err(CliError::input(format!("missing cube {}", p.display())));
        }
        let c = map_io::read_mrc(&p)?;
        if c.dims != [s; 3] {
            return Err(CliError::input(format!("cube {} has dims {:?}, expected {s}³", p.display(), c.dims)));
        }
        cubes.push(c.data);
    }
    let batch = CubeBatch { cubes, cube_size: s, indices: (0..plan.len()).collect() };
    let map = volume_prep::stitch(&batch, plan, &manifest.geometry)?;
    map_io::write_mrc(&map, out)?;
    let mut r = base_report("stitch");
    r.insert("out".into(), json!(out.display().to_string()));
    r.insert("dims".into(), json!(map.dims));
    r.insert("cubes".into(), json!(plan.len()));
    let text = kv_text(&[("out", out.display().to_string()), ("dims", dims3(map.dims)), ("cubes", plan.len().to_string())]);
    Ok(Report { json: Value::Object(r), text })
}

fn enhance(input: &Path, weights_dir: &Path, out: &Path) -> Result<Report, CliError> {
    let weights = nn::load_weights(weights_dir)?;
    log_inputs(&[input, &weights_dir.join(nn::WEIGHTS_MANIFEST), &weights_dir.join(nn::WEIGHTS_BLOB)])?;
    let net = Unet::new(weights.config.clone())?;
    net.check_weights(&weights)?;
    let map = map_io::read_mrc(input)?;
    let e = pipeline::enhance(&map, &net, &weights)?;
    map_io::write_mrc(&e.map, out)?;
    let mut r = base_report("enhance");
    r.insert("out".into(), json!(out.display().to_string()));
    r.insert("dims".into(), json!(e.map.dims));
    r.insert("voxel_size".into(), json!(e.map.voxel_size));
    r.insert("cubes".into(), json!(e.cubes));
    r.insert("scale".into(), json!(e.scale));
    r.insert("parameters".into(), json!(weights.num_parameters()));
    let text = kv_text(&[
        ("out", out.display().to_string()),
        ("dims", dims3(e.map.dims)),
        ("voxel_size", fmt3(e.map.voxel_size)),
        ("cubes", e.cubes.to_string()),
        ("scale", e.scale.to_string()),
    ]);
    Ok(Report { json: Value::Object(r), text })
}

fn train_toy(cfg: &PipelineConfig, save: Option<&Path>) -> Result<Report, CliError> {
    let run = pipeline::train_toy(&cfg.toy_model, &cfg.train, cfg.seed)?;
    let first = *run.losses.first().ok_or_else(|| CliError::config("train.steps must be positive"))?;
    let last = *run.losses.last().expect("non-empty");
    let ratio = last as f64 / first as f64;
    if let Some(dir) = save {
        nn::save_weights(&run.weights, dir)?;
    }
    let mut r = base_report("train-toy");
    r.insert("seed".into(), json!(cfg.seed));
    r.insert("steps".into(), json!(cfg.train.steps));
    r.insert("initial_loss".into(), json!(first));
    r.insert("final_loss".into(), json!(last));
    r.insert("ratio".into(), json!(ratio));
    r.insert("losses".into(), json!(run.losses));
    r.insert("weights".into(), json!(save.map(|p| p.display().to_string())));
    let text = kv_text(&[
        ("steps", cfg.train.steps.to_string()),
        ("initial_loss", format!("{first:.6}")),
        ("final_loss", format!("{last:.6}")),
        ("ratio", format!("{ratio:.4}")),
    ]);
    Ok(Report { json: Value::Object(r), text })
}

fn init_weights(cfg: &PipelineConfig, out: &Path) -> Result<Report, CliError> {
    let net = Unet::new(cfg.model.clone())?;
    let w = net.init_weights(cfg.seed);
    nn::save_weights(&w, out)?;
    let mut r = base_report("init-weights");
    r.insert("out".into(), json!(out.display().to_string()));
    r.insert("parameters".into(), json!(w.num_parameters()));
    r.insert("config".into(), json!(w.config));
    let text = kv_text(&[("out", out.display().to_string()), ("parameters", w.num_parameters().to_string())]);
    Ok(Report { json: Value::Object(r), text })
}

fn eval_cc(cfg: &PipelineConfig, map: &Path, reference: &Path, pdb: Option<&Path>) -> Result<Report, CliError> {
    let mut inputs = vec![map, reference];
    inputs.extend(pdb);
    log_inputs(&inputs)?;
    let a = map_io::read_mrc(map)?;
    let b = map_io::read_mrc(reference)?;
    let s = pdb.map(structure_io::read_pdb).transpose()?;
    let rep = metrics::cc_report(&a, &b, s.as_ref(), &cfg.metrics)?;
    let mut r = base_report("eval-cc");
    r.insert("report".into(), json!(rep));
    r.insert("options".into(), json!(cfg.metrics));
    let text = kv_text(&[
        ("cc_box", format!("{:.6}", rep.cc_box)),
        ("cc_volume", rep.cc_volume.map_or("n/a".into(), |v| format!("{v:.6}"))),
        ("cc_peaks", format!("{:.6}", rep.cc_peaks)),
        ("n_box", rep.n_box.to_string()),
        ("n_volume", rep.n_volume.map_or("n/a".into(), |v| v.to_string())),
        ("n_peaks", rep.n_peaks.to_string()),
    ]);
    Ok(Report { json: Value::Object(r), text })
}

fn eval_fsc(a: &Path, b: &Path) -> Result<Report, CliError> {
    log_inputs(&[a, b])?;
    let ma = map_io::read_mrc(a)?;
    let mb = map_io::read_mrc(b)?;
    let c = metrics::fsc(&ma, &mb)?;
    let mut r = base_report("eval-fsc");
    r.insert("fsc05".into(), json!(c.fsc05));
    r.insert("at_nyquist".into(), json!(c.at_nyquist));
    r.insert("curve".into(), json!(c));
    let mut text = kv_text(&[("fsc05", format!("{:.4}", c.fsc05)), ("at_nyquist", c.at_nyquist.to_string())]);
    let _ = writeln!(text, "{:>5}  {:>10}  {:>9}", "shell", "freq(1/A)", "fsc");
    for (i, (f, v)) in c.shell_centers.iter().zip(&c.fsc).enumerate() {
        let _ = writeln!(text, "{i:>5}  {f:>10.5}  {v:>9.5}");
    }
    Ok(Report { json: Value::Object(r), text })
}

fn eval_rscc(cfg: &PipelineConfig, map: &Path, pdb: &Path, baseline: Option<&Path>) -> Result<Report, CliError> {
    let mut inputs = vec![map, pdb];
    inputs.extend(baseline);
    log_inputs(&inputs)?;
    let m = map_io::read_mrc(map)?;
    let s = structure_io::read_pdb(pdb)?;
    let params = map_sim::derive_params(cfg.resolution)?.with_grid_interval(m.voxel_size[0])?;
    let rep = metrics::rscc(&m, &s, &params)?;
    let improved = match baseline {
        Some(b) => {
            let bm = map_io::read_mrc(b)?;
            Some(rep.improved_fraction(&metrics::rscc(&bm, &s, &params)?))
        }
        None => None,
    };
    let mut r = base_report("eval-rscc");
    r.insert("report".into(), json!(rep));
    r.insert("improved_fraction".into(), json!(improved));
    let mut text = String::new();
    let _ = writeln!(text, "{:>5}  {:>6}  {:>4}  {:>8}", "chain", "seq", "res", "rscc");
    for res in &rep.residues {
        let v = res.rscc.map_or("absent".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(text, "{:>5}  {:>6}  {:>4}  {:>8}", res.chain, res.seq, res.name, v);
    }
    for (c, mean) in &rep.chain_means {
        let _ = writeln!(text, "chain {c} mean {mean:.4}");
    }
    if let Some(f) = improved {
        let _ = writeln!(text, "improved_fraction {f:.4}");
    }
    Ok(Report { json: Value::Object(r), text })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let codes: Vec<i32> = [Category::Internal, Category::Input, Category::Config, Category::Numeric, Category::Usage]
            .iter()
            .map(|c| c.exit_code())
            .collect();
        let mut d = codes.clone();
        d.dedup();
        assert_eq!(d, codes);
    }

    #[test]
    fn config_file_parses_and_validates() {
        let cfg: PipelineConfig = toml::from_str("seed = 7\nresolution = 3.0\n[model]\nbase_channels = 8\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.base_channels, 8);
        assert_eq!(cfg.model.attn_heads, 4);
        cfg.validate().unwrap();
        assert!(toml::from_str::<PipelineConfig>("bogus = 1").is_err());
        let bad = PipelineConfig { resolution: -1.0, ..Default::default() };
        assert_eq!(bad.validate().unwrap_err().category, Category::Config);
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { seed: 1, ..Default::default() };
        assert_eq!(a.hash(), PipelineConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn argument_parsing() {
        use clap::error::ErrorKind;
        let kind = |args: &[&str]| Cli::try_parse_from(args).unwrap_err().kind();
        assert_eq!(kind(&["cryomap", "no-such-command"]), ErrorKind::InvalidSubcommand);
        assert_eq!(kind(&["cryomap", "eval-fsc", "--a", "x.mrc"]), ErrorKind::MissingRequiredArgument);
        assert_eq!(kind(&["cryomap", "--help"]), ErrorKind::DisplayHelp);
        let cli = Cli::try_parse_from(["cryomap", "simulate", "--pdb", "a", "--out", "b", "--dims", "4,5,6", "--seed", "3"]).unwrap();
        assert_eq!(cli.seed, Some(3));
        match cli.command {
            Command::Simulate { dims, .. } => assert_eq!(dims, Some(vec![4, 5, 6])),
            c => panic!("{c:?}"),
        }
    }
}
