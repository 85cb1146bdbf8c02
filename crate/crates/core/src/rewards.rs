//! Per-response reward: relaxed accuracy, format tier and information
//! efficiency, combined as `acc + w1 * format + w2 * efficiency`.
//!
//! The efficiency term is `exp(-alpha * P)` where `P` averages whichever of
//! the three redundancy sub-penalties are present for the trace:
//!
//! - OCR/OCR: mean similarity over OCR pairs whose similarity exceeds `tau`
//! - box/box: mean IoU over all box pairs
//! - OCR/label: mean of each OCR text's best label similarity, kept only
//!   when it exceeds `tau`

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::similarity::{gestalt_ratio, iou};
use crate::trace::{parse_response, BoundingBox, CueCounts, FocusTrace, FormatClass};

/// Relative tolerance of the numeric correctness check.
pub const RELAXED_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("unknown answer type `{0}` (expected `numeric` or `exact`)")]
    UnknownAnswerType(String),
    #[error("numeric ground truth `{0}` does not parse as a finite number")]
    NonNumericGroundTruth(String),
    #[error("mu must be positive and finite, got {0}")]
    InvalidMu(f64),
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    Numeric,
    Exact,
}

impl FromStr for AnswerType {
    type Err = RewardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "numeric" | "numerical" | "number" => Ok(AnswerType::Numeric),
            "exact" | "text" | "string" => Ok(AnswerType::Exact),
            _ => Err(RewardError::UnknownAnswerType(s.to_string())),
        }
    }
}

impl fmt::Display for AnswerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnswerType::Numeric => "numeric",
            AnswerType::Exact => "exact",
        })
    }
}

/// Ground truth and how to compare a prediction against it.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerSpec {
    ground_truth: String,
    answer_type: AnswerType,
    mu: f64,
    numeric_truth: Option<f64>,
}

impl AnswerSpec {
    pub const DEFAULT_MU: f64 = 1e-6;

    pub fn new(ground_truth: impl Into<String>, answer_type: AnswerType) -> Result<Self, RewardError> {
        Self::with_mu(ground_truth, answer_type, Self::DEFAULT_MU)
    }

    pub fn with_mu(
        ground_truth: impl Into<String>,
        answer_type: AnswerType,
        mu: f64,
    ) -> Result<Self, RewardError> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(RewardError::InvalidMu(mu));
        }
        let ground_truth = ground_truth.into();
        let numeric_truth = match answer_type {
            AnswerType::Numeric => Some(
                parse_number(&ground_truth)
                    .ok_or_else(|| RewardError::NonNumericGroundTruth(ground_truth.clone()))?,
            ),
            AnswerType::Exact => None,
        };
        Ok(Self {
            ground_truth,
            answer_type,
            mu,
            numeric_truth,
        })
    }

    pub fn numeric(ground_truth: impl Into<String>) -> Result<Self, RewardError> {
        Self::new(ground_truth, AnswerType::Numeric)
    }

    pub fn exact(ground_truth: impl Into<String>) -> Self {
        Self::new(ground_truth, AnswerType::Exact).expect("exact specs always validate")
    }

    pub fn ground_truth(&self) -> &str {
        &self.ground_truth
    }

    pub fn answer_type(&self) -> AnswerType {
        self.answer_type
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }
}

/// How box pairs enter the box/box penalty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxPairMode {
    /// Every unordered pair counts, including disjoint ones.
    #[default]
    AllPairs,
    /// Only pairs with positive IoU count; absent when none overlap.
    OverlappingOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Decay rate of the efficiency reward.
    pub alpha: f64,
    /// Similarity threshold for the text penalties.
    pub tau: f64,
    /// Weight of the format reward.
    pub w1: f64,
    /// Weight of the efficiency reward.
    pub w2: f64,
    #[serde(default)]
    pub box_pairs: BoxPairMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            tau: 0.9,
            w1: 0.1,
            w2: 0.1,
            box_pairs: BoxPairMode::AllPairs,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let bad = |msg: String| Err(RewardError::InvalidConfig(msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        for (name, w) in [("w1", self.w1), ("w2", self.w2)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be >= 0, got {w}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: FormatClass,
    pub answer: String,
    pub cues: CueCounts,
    pub r_relaxed_acc: f64,
    pub r_format: f64,
    pub p_tt: Option<f64>,
    pub p_bb: Option<f64>,
    pub p_tb: Option<f64>,
    pub p_redundancy: f64,
    pub r_efficiency: f64,
    pub total: f64,
}

static NUMBER_RE: OnceLock<Regex> = OnceLock::new();

fn number_re() -> &'static Regex {
    NUMBER_RE.get_or_init(|| {
        Regex::new(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?").expect("valid number regex")
    })
}

/// Lenient number parsing for chart answers: drops `%`, currency signs and
/// thousands separators, then reads the whole string or, failing that, the
/// first number embedded in it.
pub fn parse_number(text: &str) -> Option<f64> {
    let cleaned: String = text
        .chars()
        .filter(|c| !matches!(c, '%' | '$' | '€' | '£' | '¥' | ','))
        .collect();
    let cleaned = cleaned.trim();
    let value = match cleaned.parse::<f64>() {
        Ok(v) => v,
        Err(_) => number_re().find(cleaned)?.as_str().parse::<f64>().ok()?,
    };
    value.is_finite().then_some(value)
}

fn normalize_exact(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn relaxed_accuracy(prediction: &str, spec: &AnswerSpec) -> f64 {
    let correct = match (spec.answer_type, spec.numeric_truth) {
        (AnswerType::Numeric, Some(truth)) => match parse_number(prediction) {
            Some(pred) => (pred - truth).abs() / truth.abs().max(spec.mu) <= RELAXED_TOLERANCE,
            None => false,
        },
        _ => normalize_exact(prediction) == normalize_exact(&spec.ground_truth),
    };
    if correct {
        1.0
    } else {
        0.0
    }
}

pub const FORMAT_REWARD_FOCUS: f64 = 1.0;
pub const FORMAT_REWARD_PLAIN: f64 = 0.667;

pub fn format_reward(format: FormatClass) -> f64 {
    match format {
        FormatClass::FocusCot => FORMAT_REWARD_FOCUS,
        FormatClass::PlainCot => FORMAT_REWARD_PLAIN,
        FormatClass::Malformed => 0.0,
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn ocr_ocr_penalty<S: AsRef<str>>(texts: &[S], tau: f64) -> Option<f64> {
    let mut hits = Vec::new();
    for (i, a) in texts.iter().enumerate() {
        for b in &texts[i + 1..] {
            let sim = gestalt_ratio(a.as_ref(), b.as_ref());
            if sim > tau {
                hits.push(sim);
            }
        }
    }
    mean(hits)
}

pub fn box_box_penalty(boxes: &[BoundingBox], mode: BoxPairMode) -> Option<f64> {
    let mut pairs = Vec::new();
    for (i, a) in boxes.iter().enumerate() {
        for b in &boxes[i + 1..] {
            let v = iou(a, b);
            if mode == BoxPairMode::AllPairs || v > 0.0 {
                pairs.push(v);
            }
        }
    }
    mean(pairs)
}

pub fn ocr_box_penalty<S: AsRef<str>, L: AsRef<str>>(
    texts: &[S],
    labels: &[L],
    tau: f64,
) -> Option<f64> {
    if labels.is_empty() {
        return None;
    }
    let best = texts.iter().filter_map(|t| {
        let m = labels
            .iter()
            .map(|l| gestalt_ratio(t.as_ref(), l.as_ref()))
            .fold(f64::NEG_INFINITY, f64::max);
        (m > tau).then_some(m)
    });
    mean(best)
}

/// The three sub-penalties and their combined mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Redundancy {
    pub p_tt: Option<f64>,
    pub p_bb: Option<f64>,
    pub p_tb: Option<f64>,
    pub total: f64,
}

pub fn redundancy(trace: &FocusTrace, cfg: &RewardConfig) -> Redundancy {
    let texts: Vec<&str> = trace.ocr_texts().collect();
    let boxes: Vec<BoundingBox> = trace.boxes().cloned().collect();
    let labels: Vec<&str> = trace.labels().collect();
    let p_tt = ocr_ocr_penalty(&texts, cfg.tau);
    let p_bb = box_box_penalty(&boxes, cfg.box_pairs);
    let p_tb = ocr_box_penalty(&texts, &labels, cfg.tau);
    Redundancy {
        p_tt,
        p_bb,
        p_tb,
        total: mean([p_tt, p_bb, p_tb].into_iter().flatten()).unwrap_or(0.0),
    }
}

pub fn redundancy_penalty(trace: &FocusTrace, cfg: &RewardConfig) -> f64 {
    redundancy(trace, cfg).total
}

pub fn efficiency_reward(penalty: f64, alpha: f64) -> f64 {
    (-alpha * penalty).exp()
}

pub fn score_trace(trace: &FocusTrace, spec: &AnswerSpec, cfg: &RewardConfig) -> RewardBreakdown {
    let r_relaxed_acc = relaxed_accuracy(&trace.answer, spec);
    let r_format = format_reward(trace.format);
    let red = redundancy(trace, cfg);
    let r_efficiency = efficiency_reward(red.total, cfg.alpha);
    RewardBreakdown {
        format: trace.format,
        answer: trace.answer.clone(),
        cues: trace.cue_counts(),
        r_relaxed_acc,
        r_format,
        p_tt: red.p_tt,
        p_bb: red.p_bb,
        p_tb: red.p_tb,
        p_redundancy: red.total,
        r_efficiency,
        total: r_relaxed_acc + cfg.w1 * r_format + cfg.w2 * r_efficiency,
    }
}

pub fn score_response(response: &str, spec: &AnswerSpec, cfg: &RewardConfig) -> RewardBreakdown {
    score_trace(&parse_response(response), spec, cfg)
}
