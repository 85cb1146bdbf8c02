use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::curation::QualityVerdict;
use super::PipelineError;
use crate::rewards::{AnswerSpec, AnswerType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Easy,
    Medium,
    Hard,
}

/// Where `sample_rl_set` routed a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Rl,
    ColdStart,
    Unused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub text: String,
    /// Unset until the judge stage has run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

fn default_answer_type() -> AnswerType {
    AnswerType::Numeric
}

/// One chart question moving through the curation stages. Fields this
/// crate does not know about are carried through untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub question: String,
    pub ground_truth: String,
    #[serde(default = "default_answer_type")]
    pub answer_type: AnswerType,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paths: Vec<ReasoningPath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket: Option<Bucket>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focus_cot: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualityVerdict>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, question: impl Into<String>, ground_truth: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            image: None,
            question: question.into(),
            ground_truth: ground_truth.into(),
            answer_type: AnswerType::Numeric,
            paths: Vec::new(),
            pass_count: None,
            bucket: None,
            split: None,
            focus_cot: None,
            quality: None,
            extra: Map::new(),
        }
    }

    pub fn answer_spec(&self) -> Result<AnswerSpec, PipelineError> {
        Ok(AnswerSpec::new(self.ground_truth.clone(), self.answer_type)?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |reason: String| {
            Err(PipelineError::InvalidRecord {
                id: self.id.clone(),
                reason,
            })
        };
        if self.id.is_empty() {
            return bad("empty id".into());
        }
        if let Some(n) = self.pass_count {
            if n > self.paths.len() {
                return bad(format!("pass_count {n} exceeds {} paths", self.paths.len()));
            }
        }
        if self.bucket.is_some() && self.pass_count.is_none() {
            return bad("bucket set without pass_count".into());
        }
        Ok(())
    }
}

/// Reads a line-delimited record file. Blank lines are ignored; every
/// other line yields either a record or the parse error for that line
/// (1-based line number).
pub fn read_records<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<Vec<(usize, Result<T, serde_json::Error>)>, PipelineError> {
    let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, serde_json::from_str(&line)));
    }
    Ok(out)
}

/// Single writer appending one JSON object per line.
///
/// Opening an existing file drops a trailing partial line first, so a run
/// interrupted mid-write can be resumed without corrupting the file.
pub struct JsonlAppender {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlAppender {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref().to_path_buf();
        if path.exists() {
            let data = std::fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
            if !data.is_empty() && data.last() != Some(&b'\n') {
                let keep = data.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                let f = OpenOptions::new()
                    .write(true)
                    .open(&path)
                    .map_err(|e| PipelineError::io(&path, e))?;
                f.set_len(keep as u64).map_err(|e| PipelineError::io(&path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| PipelineError::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn append<T: Serialize>(&mut self, value: &T) -> Result<(), PipelineError> {
        let line = serde_json::to_string(value).map_err(|e| PipelineError::io(&self.path, e.into()))?;
        writeln!(self.out, "{line}").map_err(|e| PipelineError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<(), PipelineError> {
        self.out.flush().map_err(|e| PipelineError::io(&self.path, e))
    }
}
