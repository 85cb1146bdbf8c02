use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use super::{pool, CliError, Exit, ObjectiveArgs, RewardArgs, SCHEMA_VERSION};
use crate::objective::group_advantages;
use crate::rewards::{score_response, AnswerSpec, AnswerType, RewardBreakdown, RewardConfig};
use crate::trace::FormatClass;

pub const SCORE_SCHEMA: &str = "focusrl.score";

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    /// Rollout records, one JSON object per line:
    /// {id, question, ground_truth, answer_type, responses: [..]}.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Scored records (header line first).
    #[arg(long, short)]
    pub output: PathBuf,
    #[command(flatten)]
    pub reward: RewardArgs,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Value, String> {
    obj.get(key).ok_or_else(|| format!("missing `{key}`"))
}

/// Scores one rollout record, returning it with `scores` and `advantages`
/// appended. Groups of one response get `advantages: null`.
pub fn score_record(line: &str, reward: &RewardConfig, std_floor: f64) -> Result<(Value, Vec<RewardBreakdown>), String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let Value::Object(mut obj) = value else {
        return Err("record is not a JSON object".into());
    };
    if !field(&obj, "id")?.is_string() {
        return Err("`id` must be a string".into());
    }
    let truth = match field(&obj, "ground_truth")? {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        _ => return Err("`ground_truth` must be a string or number".into()),
    };
    let answer_type = match obj.get("answer_type") {
        None => AnswerType::Numeric,
        Some(Value::String(s)) => s.parse().map_err(|e| format!("{e}"))?,
        Some(_) => return Err("`answer_type` must be a string".into()),
    };
    let spec = AnswerSpec::new(truth, answer_type).map_err(|e| e.to_string())?;
    let responses = field(&obj, "responses")?
        .as_array()
        .ok_or("`responses` must be an array")?
        .iter()
        .map(|r| r.as_str().map(str::to_owned).ok_or("responses must be strings"))
        .collect::<Result<Vec<_>, _>>()?;
    if responses.is_empty() {
        return Err("`responses` is empty".into());
    }
    let scores: Vec<RewardBreakdown> = responses.iter().map(|r| score_response(r, &spec, reward)).collect();
    let rewards: Vec<f64> = scores.iter().map(|b| b.total).collect();
    let advantages = if rewards.len() > 1 {
        json!(group_advantages(&rewards, std_floor).map_err(|e| e.to_string())?)
    } else {
        Value::Null
    };
    obj.insert("scores".into(), serde_json::to_value(&scores).map_err(|e| e.to_string())?);
    obj.insert("advantages".into(), advantages);
    Ok((Value::Object(obj), scores))
}

#[derive(Debug, Default)]
struct Summary {
    records: usize,
    responses: usize,
    errors: usize,
    sums: [f64; 5],
    formats: BTreeMap<&'static str, usize>,
    /// Totals in bins of width 0.2; the last bin also takes 1.2 and above.
    histogram: [usize; 6],
}

impl Summary {
    fn add(&mut self, scores: &[RewardBreakdown]) {
        self.records += 1;
        for b in scores {
            self.responses += 1;
            for (s, v) in self.sums.iter_mut().zip([b.total, b.r_relaxed_acc, b.r_format, b.r_efficiency, b.p_redundancy]) {
                *s += v;
            }
            *self.formats.entry(b.format.as_str()).or_default() += 1;
            let bin = ((b.total / 0.2).floor().max(0.0) as usize).min(5);
            self.histogram[bin] += 1;
        }
    }

    fn print(&self) {
        println!(
            "score: {} records, {} responses, {} errors",
            self.records, self.responses, self.errors
        );
        if self.responses == 0 {
            return;
        }
        let n = self.responses as f64;
        let [t, a, f, e, p] = self.sums.map(|s| s / n);
        println!("mean total={t:.4} accuracy={a:.4} format={f:.4} efficiency={e:.4} p_redundancy={p:.4}");
        let formats: Vec<String> = [FormatClass::FocusCot, FormatClass::PlainCot, FormatClass::Malformed]
            .iter()
            .map(|c| format!("{} {}", c.as_str(), self.formats.get(c.as_str()).copied().unwrap_or(0)))
            .collect();
        println!("formats: {}", formats.join(", "));
        let bins: Vec<String> = self
            .histogram
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let lo = i as f64 * 0.2;
                if i == 5 {
                    format!("[{lo:.1},..) {c}")
                } else {
                    format!("[{lo:.1},{:.1}) {c}", lo + 0.2)
                }
            })
            .collect();
        println!("total histogram: {}", bins.join(" | "));
    }
}

pub(super) fn cmd_score(args: &ScoreArgs) -> Result<Exit, CliError> {
    let reward = args.reward.config()?;
    let objective = args.objective.config()?;
    let file = File::open(&args.input).map_err(|e| CliError::io(&args.input, e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(&args.input, e))?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    if lines.is_empty() {
        return Err(CliError::new(Exit::NoRecords, format!("no records in {}", args.input.display())));
    }

    let results: Vec<_> = pool(args.jobs)?.install(|| {
        lines
            .par_iter()
            .map(|(_, l)| score_record(l, &reward, objective.std_floor))
            .collect()
    });

    let out_file = File::create(&args.output).map_err(|e| CliError::io(&args.output, e))?;
    let mut out = BufWriter::new(out_file);
    let header = json!({
        "schema": SCORE_SCHEMA,
        "version": SCHEMA_VERSION,
        "reward": reward,
        "std_floor": objective.std_floor,
    });
    let io = |e| CliError::io(&args.output, e);
    writeln!(out, "{header}").map_err(io)?;
    let mut summary = Summary::default();
    for ((line_no, _), result) in lines.iter().zip(results) {
        match result {
            Ok((record, scores)) => {
                writeln!(out, "{record}").map_err(io)?;
                summary.add(&scores);
            }
            Err(e) => {
                summary.errors += 1;
                eprintln!("line {line_no}: skipped: {e}");
            }
        }
    }
    out.flush().map_err(io)?;
    summary.print();
    Ok(match (summary.errors, summary.records) {
        (0, _) => Exit::Ok,
        (_, 0) => Exit::NoRecords,
        _ => Exit::Partial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_response_group() {
        let line = r#"{"id":"q1","question":"?","ground_truth":"42","answer_type":"numeric","responses":[
            "<think><focus><ocr>Total: 42</ocr></focus></think><answer>42</answer>",
            "<think>read it</think><answer>30</answer>"],"tag":7}"#
            .replace('\n', "");
        let (v, scores) = score_record(&line, &RewardConfig::default(), 1e-8).unwrap();
        assert!((scores[0].total - 1.2).abs() < 1e-12);
        assert_eq!(v["advantages"], json!([1.0, -1.0]));
        assert_eq!(v["tag"], 7);
        assert_eq!(v["scores"][1]["format"], "plain_cot");
        assert!((scores[1].total - 0.1667).abs() < 1e-12);
    }

    #[test]
    fn record_errors() {
        let cfg = RewardConfig::default();
        assert!(score_record("nope", &cfg, 1e-8).is_err());
        let bad_type = r#"{"id":"a","ground_truth":"1","answer_type":"fuzzy","responses":["x"]}"#;
        assert!(score_record(bad_type, &cfg, 1e-8).unwrap_err().contains("fuzzy"));
        let single = r#"{"id":"a","ground_truth":1.5,"responses":["<answer>1.5</answer>"]}"#;
        let (v, _) = score_record(single, &cfg, 1e-8).unwrap();
        assert!(v["advantages"].is_null());
    }
}
