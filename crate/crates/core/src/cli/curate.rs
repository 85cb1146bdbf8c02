use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, ValueEnum};
use serde_json::Value;

use super::{CliError, Exit, RewardArgs};
use crate::pipeline::{
    errors_path, filter_hid, run_stage, BucketThresholds, ChartRecord, FailureKind, FilterConfig,
    HttpProvider, Prompts, Provider, RetryingProvider, Stage, StageOptions, StubProvider,
    DEFAULT_HID_THRESHOLD, ENV_PROVIDER_MODEL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    /// Offline canned responses; never touches the network.
    Stub,
    /// JSON over HTTP at $FOCUSRL_PROVIDER_URL.
    Http,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse::<Stage>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// generate | judge | bucket | split | reconstruct | filter
    #[arg(value_parser = parse_stage)]
    pub stage: Stage,
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    /// Continue an existing output, skipping ids it already holds.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, value_enum, default_value_t = ProviderKind::Stub)]
    pub provider: ProviderKind,
    /// Model name sent to the provider (default: $FOCUSRL_PROVIDER_MODEL, else "stub").
    #[arg(long)]
    pub model: Option<String>,
    /// Canned stub responses, one per line.
    #[arg(long)]
    pub stub_responses: Option<PathBuf>,
    /// Record ids the stub provider fails for (fault injection).
    #[arg(long, value_delimiter = ',', hide = true)]
    pub fail_ids: Vec<String>,
    /// Directory overriding the bundled prompt templates.
    #[arg(long)]
    pub prompt_dir: Option<PathBuf>,
    /// Reasoning paths sampled per question.
    #[arg(long, default_value_t = 8)]
    pub n_paths: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 1024)]
    pub max_tokens: u32,
    /// Pass count at or above which a question is easy.
    #[arg(long, default_value_t = 7)]
    pub hi: usize,
    /// Pass count at or below which a question is hard.
    #[arg(long, default_value_t = 0)]
    pub lo: usize,
    /// Size of the RL set drawn by `split`.
    #[arg(long)]
    pub total_n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest redundancy penalty a kept chain may carry.
    #[arg(long, default_value_t = 0.5)]
    pub max_penalty: f64,
    /// Keep chains whose answer is wrong.
    #[arg(long)]
    pub allow_incorrect: bool,
    #[command(flatten)]
    pub reward: RewardArgs,
    /// Attempts per provider call (transient failures only).
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
    /// Delay before the first retry; doubles after each.
    #[arg(long, default_value_t = 500)]
    pub backoff_ms: u64,
    #[arg(long, default_value_t = 120)]
    pub timeout_secs: u64,
    /// Records processed concurrently; bounds in-flight provider calls.
    #[arg(long, default_value_t = 4)]
    pub jobs: usize,
}

impl PipelineArgs {
    fn options(&self) -> Result<StageOptions, CliError> {
        let prompts = match &self.prompt_dir {
            Some(dir) => Prompts::from_dir(dir)?,
            None => Prompts::default(),
        };
        let model = self
            .model
            .clone()
            .or_else(|| std::env::var(ENV_PROVIDER_MODEL).ok())
            .unwrap_or_else(|| "stub".into());
        let opts = StageOptions {
            model,
            n_paths: self.n_paths,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            thresholds: BucketThresholds { hi: self.hi, lo: self.lo },
            total_n: self.total_n,
            seed: self.seed,
            filter: FilterConfig {
                reward: self.reward.config()?,
                max_penalty: self.max_penalty,
                require_correct: !self.allow_incorrect,
            },
            jobs: self.jobs,
            resume: self.resume,
            prompts,
        };
        opts.validate()?;
        Ok(opts)
    }

    fn provider(&self) -> Result<Box<dyn Provider>, CliError> {
        let backoff = Duration::from_millis(self.backoff_ms);
        Ok(match self.provider {
            ProviderKind::Stub => {
                let stub = match &self.stub_responses {
                    None => StubProvider::default(),
                    Some(path) => {
                        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                        let lines: Vec<String> =
                            text.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned).collect();
                        if lines.is_empty() {
                            return Err(CliError::validation(format!("{}: no stub responses", path.display())));
                        }
                        StubProvider::new(lines)
                    }
                };
                Box::new(RetryingProvider::new(stub.failing_for(self.fail_ids.clone()), self.retries, backoff))
            }
            ProviderKind::Http => {
                let http = HttpProvider::from_env(Duration::from_secs(self.timeout_secs))?;
                Box::new(RetryingProvider::new(http, self.retries, backoff))
            }
        })
    }
}

pub(super) fn cmd_pipeline(args: &PipelineArgs) -> Result<Exit, CliError> {
    let opts = args.options()?;
    let provider = args.provider()?;
    let report = run_stage(args.stage, &args.input, &args.output, provider.as_ref(), &opts)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for f in &report.failures {
        eprintln!("{} `{}`: {:?}: {}", f.stage, f.id, f.kind, f.message);
    }
    println!(
        "pipeline {}: {} input records, {} processed, {} already done, {} failed, {} provider calls",
        report.stage,
        report.input_records,
        report.processed,
        report.skipped_existing,
        report.failed(),
        report.provider_calls,
    );
    if report.failed() > 0 {
        println!("failures listed in {}", errors_path(&args.output).display());
    }
    Ok(if report.input_records == 0 {
        Exit::NoRecords
    } else if report.failed_with(FailureKind::Provider) > 0 {
        Exit::Provider
    } else if report.failed_with(FailureKind::Io) > 0 {
        Exit::Io
    } else if report.failed() > 0 {
        Exit::Validation
    } else {
        Exit::Ok
    })
}

#[derive(Debug, Clone, Args)]
pub struct ChartIdArgs {
    /// Chart score records: {id, s_rich, s_eff, s_clar, s_inter, ...}.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Retained charts with `chart_id` added (default: standard output).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Smallest density kept.
    #[arg(long, default_value_t = DEFAULT_HID_THRESHOLD)]
    pub threshold: f64,
}

pub(super) fn cmd_chart_id(args: &ChartIdArgs) -> Result<Exit, CliError> {
    if !args.threshold.is_finite() {
        return Err(CliError::validation("--threshold must be finite"));
    }
    let file = File::open(&args.input).map_err(|e| CliError::io(&args.input, e))?;
    let mut scored = Vec::new();
    let mut errors = 0;
    let mut total = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(&args.input, e))?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let parsed = serde_json::from_str::<ChartRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|mut r| {
                r.chart_id = Some(r.scores.chart_id().map_err(|e| e.to_string())?);
                Ok(r)
            });
        match parsed {
            Ok(r) => scored.push(r),
            Err(e) => {
                errors += 1;
                let id = serde_json::from_str::<Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id")?.as_str().map(str::to_owned))
                    .unwrap_or_else(|| format!("line {}", i + 1));
                eprintln!("`{id}`: skipped: {e}");
            }
        }
    }
    if total == 0 {
        return Err(CliError::new(Exit::NoRecords, format!("no records in {}", args.input.display())));
    }
    let n_scored = scored.len();
    let kept = filter_hid(scored, args.threshold);

    let (sink, summary): (Box<dyn Write>, Box<dyn Write>) = match &args.output {
        Some(p) => (
            Box::new(File::create(p).map_err(|e| CliError::io(p, e))?),
            Box::new(io::stdout()),
        ),
        None => (Box::new(io::stdout()), Box::new(io::stderr())),
    };
    let out_path = args.output.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
    let io_err = |e| CliError::io(&out_path, e);
    let mut sink = BufWriter::new(sink);
    for r in &kept {
        writeln!(sink, "{}", serde_json::to_string(r).expect("chart record serializes")).map_err(io_err)?;
    }
    sink.flush().map_err(io_err)?;
    let mut summary = summary;
    writeln!(
        summary,
        "chart-id: {total} records, {n_scored} scored, {} retained at threshold {}, {errors} errors",
        kept.len(),
        args.threshold
    )
    .map_err(io_err)?;
    Ok(match (errors, n_scored) {
        (0, _) => Exit::Ok,
        (_, 0) => Exit::NoRecords,
        _ => Exit::Validation,
    })
}
