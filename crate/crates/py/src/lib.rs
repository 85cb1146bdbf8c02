//! Python bindings: scoring, group advantages and chart density, computed by
//! the same code paths as the `focusrl` library and CLI.

// pyo3 0.22 macro expansion trips this lint on every `PyResult` return
#![allow(clippy::useless_conversion)]

use focusrl_core::objective::{group_advantages, ObjectiveConfig};
use focusrl_core::pipeline::chart_id as core_chart_id;
use focusrl_core::rewards::{score_response, AnswerSpec, AnswerType, BoxPairMode, RewardBreakdown, RewardConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn breakdown_dict<'py>(py: Python<'py>, b: &RewardBreakdown) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("format", b.format.as_str())?;
    d.set_item("answer", &b.answer)?;
    d.set_item("n_ocr", b.cues.n_ocr)?;
    d.set_item("n_box", b.cues.n_box)?;
    d.set_item("n_info", b.cues.n_info)?;
    d.set_item("r_relaxed_acc", b.r_relaxed_acc)?;
    d.set_item("r_format", b.r_format)?;
    d.set_item("p_tt", b.p_tt)?;
    d.set_item("p_bb", b.p_bb)?;
    d.set_item("p_tb", b.p_tb)?;
    d.set_item("p_redundancy", b.p_redundancy)?;
    d.set_item("r_efficiency", b.r_efficiency)?;
    d.set_item("total", b.total)?;
    Ok(d)
}

/// Scoring handle. The configuration is fixed at construction, so one
/// handle can be shared freely between threads.
#[pyclass(frozen, module = "focusrl")]
struct Scorer {
    reward: RewardConfig,
    objective: ObjectiveConfig,
}

#[pymethods]
impl Scorer {
    #[new]
    #[pyo3(signature = (
        *, alpha = 2.0, tau = 0.9, w1 = 0.1, w2 = 0.1, overlapping_boxes_only = false,
        beta = 1e-2, epsilon = 0.2, std_floor = 1e-8, adaptive_kl = true
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        alpha: f64,
        tau: f64,
        w1: f64,
        w2: f64,
        overlapping_boxes_only: bool,
        beta: f64,
        epsilon: f64,
        std_floor: f64,
        adaptive_kl: bool,
    ) -> PyResult<Self> {
        let reward = RewardConfig {
            alpha,
            tau,
            w1,
            w2,
            box_pairs: if overlapping_boxes_only { BoxPairMode::OverlappingOnly } else { BoxPairMode::AllPairs },
        };
        reward.validate().map_err(value_error)?;
        let objective = ObjectiveConfig { beta, epsilon, std_floor, adaptive_kl };
        objective.validate().map_err(value_error)?;
        Ok(Scorer { reward, objective })
    }

    /// Reward breakdown of one response as a dict.
    #[pyo3(signature = (text, ground_truth, answer_type = "numeric"))]
    fn score_response<'py>(
        &self,
        py: Python<'py>,
        text: &str,
        ground_truth: &str,
        answer_type: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let kind: AnswerType = answer_type.parse().map_err(value_error)?;
        let spec = AnswerSpec::new(ground_truth, kind).map_err(value_error)?;
        let b = py.allow_threads(|| score_response(text, &spec, &self.reward));
        breakdown_dict(py, &b)
    }

    /// Standardised advantages of one group of rewards.
    fn group_advantages(&self, py: Python<'_>, rewards: Vec<f64>) -> PyResult<Vec<f64>> {
        py.allow_threads(|| group_advantages(&rewards, self.objective.std_floor))
            .map_err(value_error)
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new_bound(py);
        d.set_item("alpha", self.reward.alpha)?;
        d.set_item("tau", self.reward.tau)?;
        d.set_item("w1", self.reward.w1)?;
        d.set_item("w2", self.reward.w2)?;
        d.set_item("overlapping_boxes_only", self.reward.box_pairs == BoxPairMode::OverlappingOnly)?;
        d.set_item("beta", self.objective.beta)?;
        d.set_item("epsilon", self.objective.epsilon)?;
        d.set_item("std_floor", self.objective.std_floor)?;
        d.set_item("adaptive_kl", self.objective.adaptive_kl)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Scorer(alpha={}, tau={}, w1={}, w2={}, beta={}, epsilon={})",
            self.reward.alpha, self.reward.tau, self.reward.w1, self.reward.w2, self.objective.beta, self.objective.epsilon
        )
    }
}

/// Chart information density from four 1..=5 scores.
#[pyfunction]
fn chart_id(s_rich: i64, s_eff: i64, s_clar: i64, s_inter: i64) -> PyResult<f64> {
    core_chart_id(s_rich, s_eff, s_clar, s_inter).map_err(value_error)
}

#[pymodule]
#[pyo3(name = "focusrl")]
fn focusrl_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Scorer>()?;
    m.add_function(wrap_pyfunction!(chart_id, m)?)?;
    Ok(())
}
