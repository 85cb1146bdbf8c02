use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use serde_json::{json, Value};

use super::{pool, CliError, Exit, ObjectiveArgs, RewardArgs, SCHEMA_VERSION};
use crate::toysim::{train, IterationRecord, TrainConfig, TrainMetrics, WindowSummary};

pub const METRICS_SCHEMA: &str = "focusrl.metrics";

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Metrics file: a header line, then one record per iteration.
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    /// Responses sampled per question.
    #[arg(long, default_value_t = 8)]
    pub group_size: usize,
    /// Questions per iteration.
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub inner_epochs: usize,
    /// Longest response in tokens (8 to 64).
    #[arg(long, default_value_t = 40)]
    pub max_len: usize,
    #[arg(long, default_value_t = 200)]
    pub cold_start_steps: usize,
    #[arg(long, default_value_t = 5.0)]
    pub cold_start_lr: f64,
    #[arg(long, default_value_t = 64)]
    pub cold_start_demos: usize,
    /// Drop the efficiency term from the reward (ablation).
    #[arg(long)]
    pub no_efficiency: bool,
    #[command(flatten)]
    pub reward: RewardArgs,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    /// Width of the first/last windows in the printed summary.
    #[arg(long, default_value_t = 20)]
    pub window: usize,
    /// Worker threads for rollout sampling (0 = one per core).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

impl SimulateArgs {
    pub fn config(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            iterations: self.iterations,
            group_size: self.group_size,
            groups_per_iteration: self.groups,
            lr: self.lr,
            inner_epochs: self.inner_epochs,
            max_len: self.max_len,
            seed: self.seed,
            cold_start_steps: self.cold_start_steps,
            cold_start_lr: self.cold_start_lr,
            cold_start_demos: self.cold_start_demos,
            reward: self.reward.config()?,
            objective: self.objective.config()?,
            efficiency_reward: !self.no_efficiency,
            adaptive_kl: !self.objective.fixed_kl,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_window(label: &str, w: &WindowSummary) {
    println!(
        "{label} [{}, {}): reward={:.4} accuracy={:.4} focus_rate={:.4} p_redundancy={:.4} n_info={:.4} beta={:.6} objective={:.4}",
        w.start, w.end, w.mean_reward, w.mean_accuracy, w.focus_rate, w.mean_p_redundancy, w.mean_n_info, w.mean_beta, w.objective
    );
}

pub(super) fn cmd_simulate(args: &SimulateArgs) -> Result<Exit, CliError> {
    if args.window == 0 {
        return Err(CliError::validation("--window must be at least 1"));
    }
    let cfg = args.config()?;
    let started = Instant::now();
    let outcome = pool(args.jobs)?.install(|| train(&cfg))?;

    let file = File::create(&args.output).map_err(|e| CliError::io(&args.output, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| CliError::io(&args.output, e);
    let header = json!({
        "schema": METRICS_SCHEMA,
        "version": SCHEMA_VERSION,
        "efficiency_reward": cfg.efficiency_reward,
        "adaptive_kl": cfg.adaptive_kl,
        "task": outcome.task.id,
        "config": cfg,
    });
    writeln!(out, "{header}").map_err(io)?;
    for r in outcome.metrics.records() {
        writeln!(out, "{}", serde_json::to_string(&r).expect("metrics serialize")).map_err(io)?;
    }
    out.flush().map_err(io)?;

    let m = &outcome.metrics;
    println!(
        "simulate seed {}: {} iterations in {:.2}s (efficiency reward {}, KL {})",
        cfg.seed,
        m.len(),
        started.elapsed().as_secs_f64(),
        if cfg.efficiency_reward { "on" } else { "off" },
        if cfg.adaptive_kl { "adaptive" } else { "fixed" },
    );
    print_window("first", &m.first_window(args.window));
    print_window("last ", &m.last_window(args.window));
    Ok(Exit::Ok)
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Metrics files written by `simulate`.
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub window: usize,
}

/// Reads a metrics file: the header object and the per-iteration series.
pub fn read_metrics(path: &std::path::Path) -> Result<(Value, TrainMetrics), CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |m: String| CliError::validation(format!("{}: {m}", path.display()));
    let header: Value = match lines.next() {
        Some(l) => serde_json::from_str(&l.map_err(|e| CliError::io(path, e))?).map_err(|e| bad(e.to_string()))?,
        None => return Err(CliError::new(Exit::NoRecords, format!("{}: empty metrics file", path.display()))),
    };
    if header.get("schema").and_then(Value::as_str) != Some(METRICS_SCHEMA) {
        return Err(bad("missing metrics header".into()));
    }
    let version = header.get("version").and_then(Value::as_u64);
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(bad(format!("unsupported metrics version {version:?}")));
    }
    let mut metrics = TrainMetrics::default();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: IterationRecord = serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
        metrics.push(&r);
    }
    Ok((header, metrics))
}

pub(super) fn cmd_report(args: &ReportArgs) -> Result<Exit, CliError> {
    if args.window == 0 {
        return Err(CliError::validation("--window must be at least 1"));
    }
    for path in &args.metrics {
        let (header, m) = read_metrics(path)?;
        if m.is_empty() {
            return Err(CliError::new(Exit::NoRecords, format!("{}: no iterations", path.display())));
        }
        let flag = |k: &str| header.get(k).and_then(Value::as_bool).unwrap_or(true);
        println!(
            "{}: {} iterations, seed {}, efficiency reward {}, KL {}",
            path.display(),
            m.len(),
            header["config"]["seed"],
            if flag("efficiency_reward") { "on" } else { "off" },
            if flag("adaptive_kl") { "adaptive" } else { "fixed" },
        );
        let (first, last) = (m.first_window(args.window), m.last_window(args.window));
        print_window("  first", &first);
        print_window("  last ", &last);
        println!(
            "  change: reward {:+.4}, p_redundancy {:+.4}, n_info {:+.4}",
            last.mean_reward - first.mean_reward,
            last.mean_p_redundancy - first.mean_p_redundancy,
            last.mean_n_info - first.mean_n_info,
        );
    }
    Ok(Exit::Ok)
}
