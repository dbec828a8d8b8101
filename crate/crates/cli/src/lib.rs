//! Command-line surface of the sparse radar detector.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 numeric failure.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use skpp_core::{BlockKind, Config, RenderMode};

pub mod commands;
pub mod scenes;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] skpp_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use skpp_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Data(_) => 3,
            CliError::Core(e) => match e {
                E::Config { .. } | E::InvalidArgument(_) | E::Shape { .. } => 2,
                E::Parse { .. } | E::Io { .. } | E::Checkpoint(_) => 3,
                E::NonFinite(_) | E::Diverged { .. } => 4,
            },
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "skpp", version, about = "Sparse radar BEV object detection")]
pub struct Cli {
    /// Worker threads for the parallel kernels (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a point cloud into the sparse input grid.
    Render(RenderArgs),
    /// Run the full detector on a point cloud.
    Forward(ForwardArgs),
    /// Overfit the detector on synthetic scenes.
    TrainToy(TrainArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Compare sparse and dense cost of the backbone.
    Bench(BenchArgs),
    /// Write synthetic scenes as point CSVs and ground-truth files.
    Synth(SynthArgs),
    /// Train and score every rendering x backbone combination.
    Ablation(AblationArgs),
    /// Print the effective configuration.
    DumpConfig(ConfigArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Spp,
    Skpbev,
    Skpp,
}

impl From<ModeArg> for RenderMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Spp => RenderMode::Spp,
            ModeArg::Skpbev => RenderMode::Skpbev,
            ModeArg::Skpp => RenderMode::Skpp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackboneArg {
    Dpvc,
    Sscn,
}

impl From<BackboneArg> for BlockKind {
    fn from(b: BackboneArg) -> Self {
        match b {
            BackboneArg::Dpvc => BlockKind::Dpvc,
            BackboneArg::Sscn => BlockKind::Sscn,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,

    /// Built-in configuration (default: paper).
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,

    /// Override the grid rendering mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,

    /// Use this block type for every encoder stage.
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneArg>,

    /// Override the seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<Config> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(path), _) => Config::load(path)?,
            (None, Some(Preset::Desk)) => Config::desk(),
            (None, _) => Config::paper(),
        };
        if let Some(m) = self.mode {
            cfg.render.mode = m.into();
        }
        if let Some(b) = self.backbone {
            cfg.backbone.blocks = vec![b.into(); cfg.stages()];
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Point CSV with header `frame,x,y,vr,rcs`.
    #[arg(long)]
    pub points: PathBuf,
    /// Checkpoint to load the rendering weights from.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Grid dump destination (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ForwardArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub points: PathBuf,
    /// Checkpoint; without one the seeded initial weights are used.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Detections destination (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// TOML file with `[[scene]]` tables.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Checkpoint destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV (default: the checkpoint path with `.loss.csv` appended).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Matching thresholds in meters.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0, 4.0])]
    pub thresholds: Vec<f64>,
    /// Also write the metrics CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Point CSV to benchmark on.
    #[arg(long, required_unless_present = "density", conflicts_with = "density")]
    pub points: Option<PathBuf>,
    /// Benchmark on a synthetic cloud occupying this fraction of cells.
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
    /// Skip timing the dense convolution oracle.
    #[arg(long)]
    pub no_dense_timing: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub scenes: PathBuf,
    /// Directory receiving `scene_<k>.csv` and `scene_<k>.gt`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Metrics CSV destination (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> CliResult {
    match &cli.command {
        Command::Render(a) => commands::render(a, out),
        Command::Forward(a) => commands::forward(a, out),
        Command::TrainToy(a) => commands::train_toy(a, out),
        Command::Eval(a) => commands::eval(a, out),
        Command::Bench(a) => commands::bench(a, out),
        Command::Synth(a) => commands::synth(a, out),
        Command::Ablation(a) => commands::ablation(a, out),
        Command::DumpConfig(a) => commands::dump_config(a, out),
    }
}
