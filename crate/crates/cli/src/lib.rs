//! Command-line driver for the stroke segmentation pipeline.
//!
//! Every subcommand prints a human-readable summary followed by one line
//! of JSON, and returns an exit code: 0 success, 1 failed self-check,
//! 2 usage or invalid input, 3 I/O failure, 4 numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use strokeseg_core::volume::Projection;

pub mod config;
pub mod pipeline;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// A command failure carrying its exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, msg: msg.into() }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self { code: EXIT_IO, msg: msg.into() }
    }

    pub fn check(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_CHECK_FAILED,
            msg: msg.into(),
        }
    }
}

impl From<strokeseg_core::Error> for Failure {
    fn from(e: strokeseg_core::Error) -> Self {
        use strokeseg_core::Error as E;
        let code = match &e {
            E::Invalid { .. } | E::DimMismatch { .. } | E::Tensor(_) => EXIT_USAGE,
            E::Format { .. } | E::Io { .. } | E::Json(_) => EXIT_IO,
            E::NonFiniteLoss { .. } => EXIT_NUMERIC,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<strokeseg_tensor::TensorError> for Failure {
    fn from(e: strokeseg_tensor::TensorError) -> Self {
        strokeseg_core::Error::from(e).into()
    }
}

#[derive(Parser, Debug)]
#[command(name = "strokeseg", version, about = "Stroke lesion segmentation on head CT")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the default run configuration.
    Defaults,
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
    /// Train the per-view models.
    Train(TrainArgs),
    /// Predict per-view class probability volumes.
    Predict(PredictArgs),
    /// Fuse the three views, close the masks and compute V_pred.
    Fuse(FuseArgs),
    /// Classify each case from its V_pred volumes.
    Classify(ClassifyArgs),
    /// Score fused masks against the ground truth, or compare class lists.
    Evaluate(EvaluateArgs),
    /// Two-sided Fisher exact test of two error counts out of n cases each.
    Stats(StatsArgs),
    /// Finite-difference checks of every op, block and the tiny model.
    Gradcheck,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long)]
    pub count: Option<usize>,
    /// Ischemic, hemorrhagic and healthy fractions, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub mix: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train only these views (default: all three).
    #[arg(long, value_delimiter = ',')]
    pub projection: Vec<Projection>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Base seed of the training runs.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of seeds per view, overriding the ensemble configuration.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Number of best seeds kept per view.
    #[arg(long)]
    pub keep: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Which cases of the manifest to predict.
    #[arg(long, value_enum, default_value_t = pipeline::SplitArg::Val)]
    pub split: pipeline::SplitArg,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k_axial: Option<f64>,
    #[arg(long)]
    pub k_coronal: Option<f64>,
    #[arg(long)]
    pub k_sagittal: Option<f64>,
    #[arg(long)]
    pub closing_radius: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub fused: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub fused: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON list of true classes; with `--predicted`, compares class lists
    /// instead of masks.
    #[arg(long, requires = "predicted")]
    pub truth: Option<PathBuf>,
    #[arg(long, requires = "truth")]
    pub predicted: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Errors of the first reader.
    #[arg(long)]
    pub a: u64,
    /// Errors of the second reader.
    #[arg(long)]
    pub b: u64,
    /// Cases read by each.
    #[arg(long)]
    pub n: u64,
}

/// Human-readable summary plus the machine-readable document of a command.
pub struct Report {
    pub text: String,
    pub json: serde_json::Value,
}

impl Report {
    pub fn new(text: impl Into<String>, value: &impl Serialize) -> Result<Self, Failure> {
        let json = serde_json::to_value(value).map_err(|e| Failure::usage(e.to_string()))?;
        Ok(Self { text: text.into(), json })
    }
}

/// Sink for progress lines of long-running commands. Called from worker
/// threads.
pub type Progress = dyn Fn(&str) + Sync;

/// Output of a finished command.
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
    pub json: Option<serde_json::Value>,
}

fn stage_name(command: &Command) -> &'static str {
    match command {
        Command::Defaults => "defaults",
        Command::Phantom(_) => "phantom",
        Command::Train(_) => "train",
        Command::Predict(_) => "predict",
        Command::Fuse(_) => "fuse",
        Command::Classify(_) => "classify",
        Command::Evaluate(_) => "evaluate",
        Command::Stats(_) => "stats",
        Command::Gradcheck => "gradcheck",
    }
}

fn dispatch(cli: &Cli, progress: &Progress) -> Result<Report, (Failure, Option<Box<Report>>)> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|f| (f, None))?,
        None => RunConfig::default(),
    };
    let plain = |r: Result<Report, Failure>| r.map_err(|f| (f, None));
    match &cli.command {
        Command::Defaults => plain(pipeline::cmd_defaults(&config)),
        Command::Phantom(a) => plain(pipeline::cmd_phantom(&mut config, a)),
        Command::Train(a) => plain(pipeline::cmd_train(&mut config, a, progress)),
        Command::Predict(a) => plain(pipeline::cmd_predict(&mut config, a)),
        Command::Fuse(a) => plain(pipeline::cmd_fuse(&mut config, a)),
        Command::Classify(a) => plain(pipeline::cmd_classify(&mut config, a)),
        Command::Evaluate(a) => plain(pipeline::cmd_evaluate(&mut config, a)),
        Command::Stats(a) => plain(pipeline::cmd_stats(a)),
        Command::Gradcheck => pipeline::cmd_gradcheck(),
    }
}

/// Runs the command line `args` (including the program name), collecting
/// its output. Progress lines are passed to `progress` as they happen.
pub fn run_with<I, T>(args: I, progress: &Progress) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let (stdout, stderr) = if code == EXIT_OK { (text, String::new()) } else { (String::new(), text) };
            return Outcome {
                code,
                stdout,
                stderr,
                json: None,
            };
        }
    };
    let stage = stage_name(&cli.command);
    let (code, report, stderr) = match dispatch(&cli, progress) {
        Ok(r) => (EXIT_OK, Some(r), String::new()),
        Err((f, r)) => (f.code, r.map(|b| *b), format!("strokeseg {stage}: {}\n", f.msg)),
    };
    let mut stdout = String::new();
    let json = report.map(|r| {
        stdout.push_str(&r.text);
        if !r.text.is_empty() && !r.text.ends_with('\n') {
            stdout.push('\n');
        }
        stdout.push_str(&r.json.to_string());
        stdout.push('\n');
        r.json
    });
    Outcome {
        code,
        stdout,
        stderr,
        json,
    }
}

/// Runs `args` without progress output.
pub fn run<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &|_| {})
}

/// Entry point of the binary: runs, prints, and returns the exit code.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> i32 {
    let out = run_with(args, &|line| println!("{line}"));
    let _ = std::io::stdout().write_all(out.stdout.as_bytes());
    let _ = std::io::stderr().write_all(out.stderr.as_bytes());
    out.code
}
