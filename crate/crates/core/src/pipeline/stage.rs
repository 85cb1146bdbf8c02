//! Resumable stages over record files.
//!
//! Every stage reads a record file and appends its results to an output
//! file keyed by record id. Ids already present in the output are never
//! processed again, so an interrupted run can simply be restarted with
//! `resume`. Provider calls go to `<output>.calls.jsonl` and per-record
//! failures to `<output>.errors.jsonl`; failed records are not written, so
//! the next resumed run retries them.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::curation::{quality_filter, sample_rl_set, BucketThresholds, FilterConfig};
use super::provider::{Message, Provider, ProviderError, ProviderRequest, ProviderResponse};
use super::record::{read_records, Bucket, JsonlAppender, ReasoningPath, SampleRecord, Split};
use super::{pass_at_k, PipelineError};
use crate::rewards::relaxed_accuracy;
use crate::trace::parse_response;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Sample candidate reasoning paths from the provider.
    Generate,
    /// Mark each path correct or not and count passes.
    Judge,
    /// Assign Easy / Medium / Hard from the pass count.
    Bucket,
    /// Draw the RL set; route leftovers to cold start.
    Split,
    /// Have the provider rewrite a correct path as a focus chain.
    Reconstruct,
    /// Rule-based and LLM quality checks on the focus chain.
    Filter,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Generate,
        Stage::Judge,
        Stage::Bucket,
        Stage::Split,
        Stage::Reconstruct,
        Stage::Filter,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Judge => "judge",
            Stage::Bucket => "bucket",
            Stage::Split => "split",
            Stage::Reconstruct => "reconstruct",
            Stage::Filter => "filter",
        }
    }

    pub fn uses_provider(&self) -> bool {
        matches!(self, Stage::Generate | Stage::Reconstruct | Stage::Filter)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage `{s}`")))
    }
}

/// Prompt templates. `{question}`, `{ground_truth}` and `{reasoning}` are
/// substituted before sending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompts {
    pub generate: String,
    pub reconstruct: String,
    pub quality: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Self {
            generate: include_str!("../../assets/prompts/generate.txt").into(),
            reconstruct: include_str!("../../assets/prompts/reconstruct.txt").into(),
            quality: include_str!("../../assets/prompts/quality.txt").into(),
        }
    }
}

impl Prompts {
    /// Defaults, overridden by `generate.txt`, `reconstruct.txt` and
    /// `quality.txt` where present in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PipelineError> {
        let mut p = Self::default();
        for (name, slot) in [
            ("generate.txt", &mut p.generate),
            ("reconstruct.txt", &mut p.reconstruct),
            ("quality.txt", &mut p.quality),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
            }
        }
        Ok(p)
    }

    fn fill(template: &str, rec: &SampleRecord, reasoning: &str) -> String {
        template
            .replace("{question}", &rec.question)
            .replace("{ground_truth}", &rec.ground_truth)
            .replace("{reasoning}", reasoning)
    }
}

#[derive(Debug, Clone)]
pub struct StageOptions {
    pub model: String,
    /// Paths sampled per question by `generate`.
    pub n_paths: usize,
    /// Sampling temperature for `generate`; the other stages use 0.
    pub temperature: f64,
    pub max_tokens: u32,
    pub thresholds: BucketThresholds,
    /// Size of the RL set drawn by `split`.
    pub total_n: Option<usize>,
    pub seed: u64,
    pub filter: FilterConfig,
    /// Records processed concurrently (also bounds in-flight provider calls).
    pub jobs: usize,
    pub resume: bool,
    pub prompts: Prompts,
}

impl Default for StageOptions {
    fn default() -> Self {
        Self {
            model: "stub".into(),
            n_paths: 8,
            temperature: 1.0,
            max_tokens: 1024,
            thresholds: BucketThresholds::default(),
            total_n: None,
            seed: 0,
            filter: FilterConfig::default(),
            jobs: 4,
            resume: false,
            prompts: Prompts::default(),
        }
    }
}

impl StageOptions {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.n_paths == 0 {
            return bad("n_paths must be at least 1".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        self.thresholds.validate()?;
        self.filter.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Io,
    Provider,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub id: String,
    pub stage: Stage,
    pub kind: FailureKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallLogEntry {
    pub request_id: String,
    pub provider: String,
    pub model: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    /// Non-blank input lines.
    pub input_records: usize,
    /// Already present in the output; not touched.
    pub skipped_existing: usize,
    /// Newly written to the output.
    pub processed: usize,
    pub failures: Vec<StageFailure>,
    pub provider_calls: usize,
    pub warnings: Vec<String>,
}

impl StageReport {
    pub fn failed(&self) -> usize {
        self.failures.len()
    }

    pub fn failed_with(&self, kind: FailureKind) -> usize {
        self.failures.iter().filter(|f| f.kind == kind).count()
    }
}

/// `<output>.<suffix>` next to the output file.
fn sidecar(output: &Path, suffix: &str) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    output.with_file_name(name)
}

pub fn calls_path(output: &Path) -> PathBuf {
    sidecar(output, "calls.jsonl")
}

pub fn errors_path(output: &Path) -> PathBuf {
    sidecar(output, "errors.jsonl")
}

fn existing_ids(output: &Path) -> Result<HashSet<String>, PipelineError> {
    if !output.exists() {
        return Ok(HashSet::new());
    }
    // a torn final line has no usable id and is dropped when appending
    Ok(read_records::<Value>(output)?
        .into_iter()
        .filter_map(|(_, v)| v.ok()?.get("id")?.as_str().map(str::to_owned))
        .collect())
}

struct Ctx<'a> {
    stage: Stage,
    provider: &'a dyn Provider,
    opts: &'a StageOptions,
}

struct Outcome {
    result: Result<Option<SampleRecord>, StageFailure>,
    calls: Vec<CallLogEntry>,
    warning: Option<String>,
}

impl Ctx<'_> {
    fn fail(&self, id: &str, kind: FailureKind, message: impl ToString) -> StageFailure {
        StageFailure {
            id: id.to_string(),
            stage: self.stage,
            kind,
            message: message.to_string(),
        }
    }

    fn call(
        &self,
        rec: &SampleRecord,
        purpose: &str,
        prompt: String,
        temperature: f64,
        calls: &mut Vec<CallLogEntry>,
    ) -> Result<ProviderResponse, ProviderError> {
        let request = ProviderRequest {
            id: format!("{}#{purpose}", rec.id),
            model: self.opts.model.clone(),
            messages: vec![Message::user(prompt, rec.image.clone())],
            temperature,
            max_tokens: self.opts.max_tokens,
        };
        let result = self.provider.complete(&request);
        calls.push(CallLogEntry {
            request_id: request.id,
            provider: self.provider.name().to_string(),
            model: request.model,
            ok: result.is_ok(),
            finish_reason: result.as_ref().ok().map(|r| r.finish_reason.clone()),
            text: result.as_ref().ok().map(|r| r.text.clone()),
            error: result.as_ref().err().map(|e| e.to_string()),
        });
        result
    }

    fn process(&self, mut rec: SampleRecord) -> Outcome {
        let mut calls = Vec::new();
        let mut warning = None;
        let result = match self.stage {
            Stage::Generate => {
                let prompt = Prompts::fill(&self.opts.prompts.generate, &rec, "");
                let mut paths = Vec::with_capacity(self.opts.n_paths);
                let mut err = None;
                for k in 0..self.opts.n_paths {
                    match self.call(&rec, &format!("gen{k}"), prompt.clone(), self.opts.temperature, &mut calls) {
                        Ok(r) => paths.push(ReasoningPath { text: r.text, correct: None }),
                        Err(e) => {
                            err = Some(e);
                            break;
                        }
                    }
                }
                match err {
                    Some(e) => Err(self.fail(&rec.id, FailureKind::Provider, e)),
                    None => {
                        rec.paths = paths;
                        rec.pass_count = None;
                        rec.bucket = None;
                        Ok(Some(rec))
                    }
                }
            }
            Stage::Judge => self.judge(rec),
            Stage::Bucket => match rec.pass_count {
                Some(n) => {
                    rec.bucket = Some(self.opts.thresholds.bucket(n));
                    Ok(Some(rec))
                }
                None => {
                    warning = Some(format!("record `{}` has no pass_count; skipped", rec.id));
                    Ok(None)
                }
            },
            Stage::Reconstruct => {
                match rec.paths.iter().find(|p| p.correct == Some(true)).map(|p| p.text.clone()) {
                    None => {
                        warning = Some(format!("record `{}` has no correct path; passed through", rec.id));
                        Ok(Some(rec))
                    }
                    Some(reasoning) => {
                        let prompt = Prompts::fill(&self.opts.prompts.reconstruct, &rec, &reasoning);
                        match self.call(&rec, "reconstruct", prompt, 0.0, &mut calls) {
                            Ok(r) => {
                                rec.focus_cot = Some(r.text);
                                Ok(Some(rec))
                            }
                            Err(e) => Err(self.fail(&rec.id, FailureKind::Provider, e)),
                        }
                    }
                }
            }
            Stage::Filter => match rec.answer_spec() {
                Err(e) => Err(self.fail(&rec.id, FailureKind::Validation, e)),
                Ok(spec) => {
                    let text = rec.focus_cot.clone();
                    let verdict = quality_filter(text.as_deref(), &spec, &self.opts.filter, |chain| {
                        let prompt = Prompts::fill(&self.opts.prompts.quality, &rec, chain);
                        self.call(&rec, "quality", prompt, 0.0, &mut calls).map(|r| r.text)
                    });
                    rec.quality = Some(verdict);
                    Ok(Some(rec))
                }
            },
            Stage::Split => unreachable!("split is handled over the whole file"),
        };
        Outcome { result, calls, warning }
    }

    fn judge(&self, mut rec: SampleRecord) -> Result<Option<SampleRecord>, StageFailure> {
        let spec = rec
            .answer_spec()
            .map_err(|e| self.fail(&rec.id, FailureKind::Validation, e))?;
        for path in &mut rec.paths {
            let answer = parse_response(&path.text).answer;
            path.correct = Some(relaxed_accuracy(&answer, &spec) == 1.0);
        }
        let judgements: Vec<bool> = rec.paths.iter().map(|p| p.correct == Some(true)).collect();
        let n = pass_at_k(&judgements).map_err(|e| self.fail(&rec.id, FailureKind::Validation, e))?;
        rec.pass_count = Some(n);
        rec.bucket = None;
        Ok(Some(rec))
    }
}

/// Runs one stage from `input` to `output`.
///
/// Returns `Err` only when the stage cannot run at all (unreadable input,
/// unwritable output, bad options, an existing output without `resume`, or
/// a split that cannot be drawn); per-record problems land in the report.
pub fn run_stage(
    stage: Stage,
    input: &Path,
    output: &Path,
    provider: &dyn Provider,
    opts: &StageOptions,
) -> Result<StageReport, PipelineError> {
    opts.validate()?;
    let lines = read_records::<Value>(input)?;
    let existing = existing_ids(output)?;
    if !existing.is_empty() && !opts.resume {
        return Err(PipelineError::Config(format!(
            "{} already holds {} records; pass resume to continue it",
            output.display(),
            existing.len()
        )));
    }
    let ctx = Ctx { stage, provider, opts };
    let mut report = StageReport {
        stage,
        input_records: lines.len(),
        skipped_existing: 0,
        processed: 0,
        failures: Vec::new(),
        provider_calls: 0,
        warnings: Vec::new(),
    };

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (line_no, value) in lines {
        let value = match value {
            Ok(v) => v,
            Err(e) => {
                report.failures.push(ctx.fail(&format!("line {line_no}"), FailureKind::Validation, e));
                continue;
            }
        };
        let id = value
            .get("id")
            .and_then(Value::as_str)
            .map_or_else(|| format!("line {line_no}"), str::to_owned);
        let rec = match serde_json::from_value::<SampleRecord>(value) {
            Ok(r) => r,
            Err(e) => {
                report.failures.push(ctx.fail(&id, FailureKind::Validation, e));
                continue;
            }
        };
        if let Err(e) = rec.validate() {
            report.failures.push(ctx.fail(&id, FailureKind::Validation, e));
            continue;
        }
        if !seen.insert(rec.id.clone()) {
            report
                .failures
                .push(ctx.fail(&id, FailureKind::Validation, "duplicate id in input"));
            continue;
        }
        records.push(rec);
    }

    let mut out = JsonlAppender::open(output)?;
    let mut calls_out = if stage.uses_provider() {
        Some(JsonlAppender::open(calls_path(output))?)
    } else {
        None
    };

    if stage == Stage::Split {
        split_records(&ctx, records, &existing, &mut out, &mut report)?;
    } else {
        let pending: Vec<SampleRecord> = records
            .into_iter()
            .filter(|r| {
                let done = existing.contains(&r.id);
                report.skipped_existing += done as usize;
                !done
            })
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
        for chunk in pending.chunks(opts.jobs * 8) {
            let outcomes: Vec<Outcome> =
                pool.install(|| chunk.par_iter().map(|r| ctx.process(r.clone())).collect());
            for o in outcomes {
                report.provider_calls += o.calls.len();
                if let Some(log) = calls_out.as_mut() {
                    for c in &o.calls {
                        log.append(c)?;
                    }
                }
                report.warnings.extend(o.warning);
                match o.result {
                    Ok(Some(rec)) => {
                        out.append(&rec)?;
                        report.processed += 1;
                    }
                    Ok(None) => {}
                    Err(f) => report.failures.push(f),
                }
            }
            out.flush()?;
            if let Some(log) = calls_out.as_mut() {
                log.flush()?;
            }
        }
    }
    out.flush()?;

    if !report.failures.is_empty() {
        let mut errs = JsonlAppender::open(errors_path(output))?;
        for f in &report.failures {
            errs.append(f)?;
        }
        errs.flush()?;
    }
    Ok(report)
}

fn split_records(
    ctx: &Ctx<'_>,
    records: Vec<SampleRecord>,
    existing: &HashSet<String>,
    out: &mut JsonlAppender,
    report: &mut StageReport,
) -> Result<(), PipelineError> {
    let total_n = ctx
        .opts
        .total_n
        .ok_or_else(|| PipelineError::Config("split needs total_n".into()))?;
    let mut pools: HashMap<Bucket, Vec<String>> = HashMap::new();
    let mut usable = Vec::new();
    for rec in records {
        match rec.bucket {
            Some(b) => {
                pools.entry(b).or_default().push(rec.id.clone());
                usable.push(rec);
            }
            None => report
                .failures
                .push(ctx.fail(&rec.id, FailureKind::Validation, "record has no bucket")),
        }
    }
    let pool = |b| pools.get(&b).map_or(&[][..], Vec::as_slice);
    // drawn over every input record, so a resumed run reproduces the same split
    let split = sample_rl_set(pool(Bucket::Easy), pool(Bucket::Medium), pool(Bucket::Hard), total_n, ctx.opts.seed)?;
    report.warnings.extend(split.warnings.iter().cloned());
    let rl: HashSet<&String> = split.rl_ids().collect();
    let cold: HashSet<&String> = split.cold_start.iter().collect();
    for mut rec in usable {
        if existing.contains(&rec.id) {
            report.skipped_existing += 1;
            continue;
        }
        rec.split = Some(if rl.contains(&rec.id) {
            Split::Rl
        } else if cold.contains(&rec.id) {
            Split::ColdStart
        } else {
            Split::Unused
        });
        out.append(&rec)?;
        report.processed += 1;
    }
    Ok(())
}
