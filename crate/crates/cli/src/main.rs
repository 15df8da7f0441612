//! `ugsplat`: command-line front end for scene setup, training, rendering and analysis.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ugsplat::scene::Split;
use ugsplat::softdrop::EvalMode;

#[derive(Parser, Debug)]
#[command(
    name = "ugsplat",
    version,
    about = "Gaussian splatting with learned per-Gaussian uncertainty"
)]
pub struct Cli {
    /// Worker threads for rendering (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Root for run directories that are not given explicitly.
    #[arg(long, global = true, env = "UGSPLAT_OUT", default_value = "runs")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic scene directory (PLY, PNG views, scene.toml).
    Synth(SynthArgs),
    /// Ingest a scene and write checkpoint-0.
    Init(InitArgs),
    /// Train from a checkpoint.
    Train(TrainArgs),
    /// Render one camera from a checkpoint.
    Render(RenderArgs),
    /// PSNR and SSIM per view of a split.
    Eval(EvalArgs),
    /// Uncertainty histogram for one view plus the omega(u) curve.
    UncertaintyStats(StatsArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// TOML synthetic-scene description; defaults apply to missing keys.
    #[arg(long, conflicts_with = "fixture")]
    pub spec: Option<PathBuf>,
    /// The three-Gaussian fixture scene.
    #[arg(long)]
    pub fixture: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub dir: PathBuf,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false, id = "source")]
pub struct SceneSource {
    /// Scene description (TOML with a PLY point cloud and posed PNG views).
    #[arg(long, group = "source")]
    pub scene: Option<PathBuf>,
    /// Synthetic-scene description, generated in memory.
    #[arg(long, group = "source")]
    pub synthetic: Option<PathBuf>,
    /// The built-in three-Gaussian fixture, generated in memory.
    #[arg(long, group = "source")]
    pub fixture: bool,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[command(flatten)]
    pub source: SceneSource,
    /// Training configuration (TOML); defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Run directory (default: <out>/<scene name>).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct Ablation {
    /// Render with the base opacity; the uncertainty network is unused.
    #[arg(long)]
    pub no_uncertainty: bool,
    /// Skip the soft dropout weight.
    #[arg(long)]
    pub no_dropout: bool,
    /// Skip the (1 - u) opacity modulation.
    #[arg(long)]
    pub no_modulation: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Replaces the checkpoint's training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Stop early at this iteration (resume later from the written checkpoint).
    #[arg(long)]
    pub until: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub ablation: Ablation,
    /// Write a checkpoint every N iterations (0: only at the end).
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: u64,
    /// Print a progress line every N iterations (0: never).
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
    /// Run directory (default: the checkpoint's directory).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EvalModeArg {
    QHalf,
    Off,
    Stochastic,
}

impl From<EvalModeArg> for EvalMode {
    fn from(m: EvalModeArg) -> Self {
        match m {
            EvalModeArg::QHalf => EvalMode::DeterministicQHalf,
            EvalModeArg::Off => EvalMode::Off,
            EvalModeArg::Stochastic => EvalMode::Stochastic,
        }
    }
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Index of a stored view.
    #[arg(long, conflicts_with = "camera")]
    pub view: Option<usize>,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    /// Camera description (TOML: width, height, fx, fy, cx, cy, world_to_camera).
    #[arg(long)]
    pub camera: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "q-half")]
    pub eval_mode: EvalModeArg,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Also write the unclipped float image and transmittance.
    #[arg(long)]
    pub raw: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// CSV destination (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    /// Points on the omega(u) curve over [0, 1].
    #[arg(long, default_value_t = 101)]
    pub points: usize,
    /// Monte-Carlo samples of q per curve point.
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    /// Output directory (default: next to the checkpoint).
    #[arg(long)]
    pub dir: Option<PathBuf>,
}

/// Machine-readable code for an error chain.
fn error_code(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<ugsplat::Error>() {
            return err.code();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "E_IO";
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return "E_CONFIG";
        }
    }
    "E_CLI"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[E_CLI]: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", error_code(&e), one_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// Causes joined with ": ", skipping any already spelled out by the layer above.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if msg.ends_with(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg.replace('\n', " ")
}
