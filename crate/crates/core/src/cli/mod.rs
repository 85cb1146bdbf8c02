//! `focusrl` command line: batch scoring, gradient check, simulation,
//! metrics reports, curation stages and chart density scores.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success, no record-level errors |
//! | 1 | partial: some records failed |
//! | 2 | no usable records (empty input, or every record failed) |
//! | 3 | I/O failure |
//! | 4 | provider failure |
//! | 5 | validation failure (flags, config or record contents) |
//! | 6 | gradient check failed |
//! | 7 | simulation diverged |

mod curate;
mod score;
mod simulate;

use std::ffi::OsString;
use std::fmt;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::objective::ObjectiveConfig;
use crate::pipeline::{PipelineError, ProviderError};
use crate::rewards::{BoxPairMode, RewardConfig};
use crate::toysim::{gradcheck, GradcheckConfig, GradientOptions, ToySimError};

pub use curate::{ChartIdArgs, PipelineArgs, ProviderKind};
pub use score::{ScoreArgs, SCORE_SCHEMA};
pub use simulate::{ReportArgs, SimulateArgs, METRICS_SCHEMA};

/// Version of the header line written at the top of score and metrics files.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Partial = 1,
    NoRecords = 2,
    Io = 3,
    Provider = 4,
    Validation = 5,
    CheckFailed = 6,
    Diverged = 7,
}

impl From<Exit> for ExitCode {
    fn from(e: Exit) -> Self {
        ExitCode::from(e as u8)
    }
}

/// A failure that ends the command, with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn new(exit: Exit, message: impl Into<String>) -> Self {
        Self { exit, message: message.into() }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::new(Exit::Io, format!("{}: {e}", path.display()))
    }

    pub fn validation(message: impl fmt::Display) -> Self {
        Self::new(Exit::Validation, message.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let exit = match &e {
            PipelineError::Io { .. } => Exit::Io,
            PipelineError::Provider(_) => Exit::Provider,
            PipelineError::NoRecords => Exit::NoRecords,
            _ => Exit::Validation,
        };
        Self::new(exit, e.to_string())
    }
}

impl From<ProviderError> for CliError {
    fn from(e: ProviderError) -> Self {
        Self::new(Exit::Provider, e.to_string())
    }
}

impl From<ToySimError> for CliError {
    fn from(e: ToySimError) -> Self {
        let exit = match e {
            ToySimError::Diverged { .. } => Exit::Diverged,
            _ => Exit::Validation,
        };
        Self::new(exit, e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "focusrl", version, about = "Focus-chain rewards, objective checks, toy RL and data curation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score rollout groups: per-response reward breakdown plus group advantages.
    Score(ScoreArgs),
    /// Compare the analytic objective gradient with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train the toy policy and write per-iteration metrics.
    Simulate(SimulateArgs),
    /// Summarise metrics files written by `simulate`.
    Report(ReportArgs),
    /// Run one data-curation stage over a record file.
    Pipeline(PipelineArgs),
    /// Compute chart density scores and keep high-density charts.
    ChartId(ChartIdArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RewardArgs {
    /// Decay rate of the efficiency reward.
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    /// Similarity threshold for text redundancy.
    #[arg(long, default_value_t = 0.9)]
    pub tau: f64,
    /// Weight of the format reward.
    #[arg(long, default_value_t = 0.1)]
    pub w1: f64,
    /// Weight of the efficiency reward.
    #[arg(long, default_value_t = 0.1)]
    pub w2: f64,
    /// Count only overlapping box pairs in the box/box penalty.
    #[arg(long)]
    pub overlapping_boxes_only: bool,
}

impl RewardArgs {
    pub fn config(&self) -> Result<RewardConfig, CliError> {
        let cfg = RewardConfig {
            alpha: self.alpha,
            tau: self.tau,
            w1: self.w1,
            w2: self.w2,
            box_pairs: if self.overlapping_boxes_only {
                BoxPairMode::OverlappingOnly
            } else {
                BoxPairMode::AllPairs
            },
        };
        cfg.validate().map_err(CliError::validation)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ObjectiveArgs {
    /// Base KL coefficient.
    #[arg(long, default_value_t = 1e-2)]
    pub beta: f64,
    /// Clip radius of the probability ratio.
    #[arg(long, default_value_t = 0.2)]
    pub epsilon: f64,
    /// Floor on the group reward standard deviation.
    #[arg(long, default_value_t = 1e-8)]
    pub std_floor: f64,
    /// Use the base KL coefficient for every response.
    #[arg(long)]
    pub fixed_kl: bool,
}

impl ObjectiveArgs {
    pub fn config(&self) -> Result<ObjectiveConfig, CliError> {
        let cfg = ObjectiveConfig {
            beta: self.beta,
            epsilon: self.epsilon,
            std_floor: self.std_floor,
            adaptive_kl: !self.fixed_kl,
        };
        cfg.validate().map_err(CliError::validation)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, default_value_t = 5)]
    pub vocab: usize,
    #[arg(long, default_value_t = 6)]
    pub max_len: usize,
    #[arg(long, default_value_t = 2)]
    pub groups: usize,
    #[arg(long, default_value_t = 4)]
    pub group_size: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = crate::toysim::GRADCHECK_STEP)]
    pub step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = crate::toysim::GRADCHECK_TOLERANCE)]
    pub tolerance: f64,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    /// Negate the analytic gradient (negative control for the check itself).
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

/// Builds a thread pool of `jobs` workers (0 = rayon's default).
pub(crate) fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::validation(format!("thread pool: {e}")))
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Exit, CliError> {
    if !(args.step > 0.0 && args.step.is_finite()) || !(args.tolerance > 0.0) {
        return Err(CliError::validation("step and tolerance must be positive"));
    }
    if args.seeds == 0 {
        return Err(CliError::validation("--seeds must be at least 1"));
    }
    let cfg = GradcheckConfig {
        vocab: args.vocab,
        max_len: args.max_len,
        groups: args.groups,
        group_size: args.group_size,
        h: args.step,
        tolerance: args.tolerance,
    };
    let objective = args.objective.config()?;
    let opts = GradientOptions { flip_sign: args.inject_sign_flip };
    let mut failed = 0;
    for seed in args.seed..args.seed + args.seeds {
        let r = gradcheck(seed, &cfg, &objective, opts)?;
        failed += !r.passed as usize;
        println!(
            "gradcheck seed {seed}: {} max_rel_error={:.3e} max_abs_error={:.3e} parameters={} nonzero={} clipped={}",
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.max_abs_error,
            r.parameters,
            r.nonzero,
            r.clipped_responses,
        );
    }
    println!("gradcheck: {}/{} seeds passed (tolerance {:e})", args.seeds as usize - failed, args.seeds, args.tolerance);
    Ok(if failed == 0 { Exit::Ok } else { Exit::CheckFailed })
}

pub fn run(cli: Cli) -> Result<Exit, CliError> {
    match cli.command {
        Command::Score(a) => score::cmd_score(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Simulate(a) => simulate::cmd_simulate(&a),
        Command::Report(a) => simulate::cmd_report(&a),
        Command::Pipeline(a) => curate::cmd_pipeline(&a),
        Command::ChartId(a) => curate::cmd_chart_id(&a),
    }
}

/// Parses `args` and runs the command. Usage errors exit with the
/// validation code rather than clap's default.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Exit::Validation.into() } else { Exit::Ok.into() };
        }
    };
    match run(cli) {
        Ok(exit) => exit.into(),
        Err(e) => {
            eprintln!("error: {e}");
            e.exit.into()
        }
    }
}
