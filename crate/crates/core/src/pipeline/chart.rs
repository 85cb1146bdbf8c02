//! Chart information-density score: a weighted mean of four five-point
//! ratings (richness, efficiency, clarity, interaction), with richness
//! weighted most.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::PipelineError;

/// Charts below this density fall in the easiest band of the benchmark.
pub const DEFAULT_HID_THRESHOLD: f64 = 3.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChartIdScores {
    pub s_rich: i64,
    pub s_eff: i64,
    pub s_clar: i64,
    pub s_inter: i64,
}

impl ChartIdScores {
    pub fn new(s_rich: i64, s_eff: i64, s_clar: i64, s_inter: i64) -> Result<Self, PipelineError> {
        let s = Self { s_rich, s_eff, s_clar, s_inter };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, value) in [
            ("s_rich", self.s_rich),
            ("s_eff", self.s_eff),
            ("s_clar", self.s_clar),
            ("s_inter", self.s_inter),
        ] {
            if !(1..=5).contains(&value) {
                return Err(PipelineError::ScoreOutOfRange { name, value });
            }
        }
        Ok(())
    }

    /// `s_rich/2 + s_eff/5 + s_clar/5 + s_inter/10`.
    ///
    /// Summed in tenths and divided once, so every attainable score is the
    /// closest double to its decimal value (e.g. exactly `3.7`, not
    /// `3.6999999999999997`) and threshold comparisons behave.
    pub fn chart_id(&self) -> Result<f64, PipelineError> {
        self.validate()?;
        let tenths = 5 * self.s_rich + 2 * self.s_eff + 2 * self.s_clar + self.s_inter;
        Ok(tenths as f64 / 10.0)
    }
}

pub fn chart_id(s_rich: i64, s_eff: i64, s_clar: i64, s_inter: i64) -> Result<f64, PipelineError> {
    ChartIdScores { s_rich, s_eff, s_clar, s_inter }.chart_id()
}

/// A scored chart as stored in a record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartRecord {
    pub id: String,
    #[serde(flatten)]
    pub scores: ChartIdScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chart_id: Option<f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Keeps charts whose density reaches `threshold`. Charts must already
/// carry a `chart_id`; those without one are dropped.
pub fn filter_hid(charts: Vec<ChartRecord>, threshold: f64) -> Vec<ChartRecord> {
    charts
        .into_iter()
        .filter(|c| c.chart_id.is_some_and(|s| s >= threshold))
        .collect()
}
