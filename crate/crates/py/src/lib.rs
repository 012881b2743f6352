//! Python module `sentinel`.
//!
//! Structured values cross the boundary as plain dicts and lists with the
//! same shape as the service's JSON.

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use sentinel_core::confidence::{self, RoutingThresholds};
use sentinel_core::config::ServiceConfig;
use sentinel_core::gate::{self, Alternative, GateConfig};
use sentinel_core::hitl::{self, TriggerConfig, TriggerDecision, TriggerState};
use sentinel_core::metrics::{self, EvalPair};
use sentinel_core::pipeline::{self, ConfirmRequest, CorrectRequest, PipelineError, RecognizeRequest};
use sentinel_core::replay;
use sentinel_core::sim::{self, SimScenario};
use sentinel_core::vqa::TaskKind;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(sentinel, SentinelError, PyException, "Pipeline error; `args[1]` is the HTTP-style status.");

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pipeline_err(e: PipelineError) -> PyErr {
    SentinelError::new_err((e.to_string(), e.http_status()))
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn parse_time(at: Option<&str>) -> PyResult<Option<DateTime<Utc>>> {
    at.map(|s| DateTime::parse_from_rfc3339(s).map(|t| t.with_timezone(&Utc)).map_err(value_err)).transpose()
}

/// Levenshtein distance between two strings.
#[pyfunction]
fn edit_distance(a: &str, b: &str) -> usize {
    metrics::edit_distance(a, b)
}

/// Mean of per-pair distance / truth length over `(predicted, truth)` pairs.
#[pyfunction]
fn cer(pairs: Vec<(String, String)>) -> PyResult<f64> {
    let pairs: Vec<EvalPair> = pairs.into_iter().map(|(p, t)| EvalPair::new(p, t, 0.0)).collect();
    metrics::cer(&pairs).map_err(value_err)
}

/// ECE and reliability bins over `(confidence, correct)` observations.
#[pyfunction]
#[pyo3(signature = (observations, bins = 10))]
fn ece(py: Python<'_>, observations: Vec<(f64, bool)>, bins: usize) -> PyResult<(f64, Py<PyAny>)> {
    let (e, bins) = metrics::ece_from_observations(&observations, bins).map_err(value_err)?;
    Ok((e, to_py(py, &bins)?))
}

/// `generation_prob * (1 - uncertainty_penalty) * format_validity`.
#[pyfunction]
fn combine(generation_prob: f64, uncertainty_penalty: f64, format_validity: f64) -> PyResult<f64> {
    confidence::combine(generation_prob, uncertainty_penalty, format_validity)
        .map(|b| b.combined)
        .map_err(value_err)
}

/// Routing band name for a combined confidence.
#[pyfunction]
#[pyo3(signature = (combined, auto_accept = 0.95, review_low = 0.70))]
fn route(py: Python<'_>, combined: f64, auto_accept: f64, review_low: f64) -> PyResult<Py<PyAny>> {
    let t = RoutingThresholds::new(auto_accept, review_low).map_err(value_err)?;
    to_py(py, &confidence::route(combined, &t))
}

/// Trigger reason for `state` at `now`, or None.
#[pyfunction]
#[pyo3(signature = (state, now, config = None))]
fn should_train(
    py: Python<'_>,
    state: &Bound<'_, PyAny>,
    now: &str,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<Option<Py<PyAny>>> {
    let state: TriggerState = from_py(state)?;
    let config: TriggerConfig = config.map(from_py).transpose()?.unwrap_or_default();
    let now = parse_time(Some(now))?.expect("given");
    match hitl::should_train(&state, &config, now) {
        TriggerDecision::NoTrain => Ok(None),
        TriggerDecision::Train(reason) => to_py(py, &reason).map(Some),
    }
}

#[pyfunction]
fn lora_param_count(layers: u64, modules_per_layer: u64, hidden_dim: u64, rank: u64) -> PyResult<u64> {
    replay::lora_param_count(layers, modules_per_layer, hidden_dim, rank).map_err(value_err)
}

/// One-sided paired t-test; returns `(t, p)` with `t` None for zero spread.
#[pyfunction]
fn paired_t_test(deltas: Vec<f64>) -> PyResult<(Option<f64>, f64)> {
    let r = gate::paired_t_test(&deltas, Alternative::Greater).map_err(value_err)?;
    Ok((r.t_statistic, r.p_value))
}

/// Gate report as a dict.
#[pyfunction]
#[pyo3(signature = (prod_scores, cand_scores, prod_heldout_acc, cand_heldout_acc, alpha = 0.05, forgetting_limit = 0.02))]
fn evaluate_gate(
    py: Python<'_>,
    prod_scores: Vec<f64>,
    cand_scores: Vec<f64>,
    prod_heldout_acc: f64,
    cand_heldout_acc: f64,
    alpha: f64,
    forgetting_limit: f64,
) -> PyResult<Py<PyAny>> {
    let config = GateConfig { alpha, forgetting_limit, ..GateConfig::default() };
    let report = gate::evaluate_gate(&prod_scores, &cand_scores, prod_heldout_acc, cand_heldout_acc, &config)
        .map_err(value_err)?;
    to_py(py, &report)
}

/// Runs the closed-loop simulation in `dir` and returns the report.
#[pyfunction]
#[pyo3(signature = (dir, scenario = None))]
fn simulate(py: Python<'_>, dir: PathBuf, scenario: Option<&Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
    let s: SimScenario = scenario.map(from_py).transpose()?.unwrap_or_default();
    let report = py.detach(|| sim::simulate(&s, &dir)).map_err(value_err)?;
    to_py(py, &report)
}

/// In-process service. Training jobs run inline when a review triggers one.
#[pyclass(frozen)]
struct Pipeline {
    inner: pipeline::Pipeline,
}

#[pymethods]
impl Pipeline {
    /// `config` is a path to a JSON config file or a dict of config fields.
    #[new]
    fn new(config: &Bound<'_, PyAny>) -> PyResult<Self> {
        let config = match config.extract::<PathBuf>() {
            Ok(path) => ServiceConfig::load(&path).map_err(value_err)?,
            Err(_) => from_py(config)?,
        };
        config.validate().map_err(value_err)?;
        let inner = pipeline::Pipeline::open(config).map_err(pipeline_err)?;
        Ok(Pipeline { inner })
    }

    fn active_version(&self) -> PyResult<u64> {
        self.inner.active_version().map_err(pipeline_err)
    }

    /// `request` has the shape of the recognize endpoint body.
    fn recognize(&self, py: Python<'_>, request: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        let req: RecognizeRequest = from_py(request)?;
        let record = py.detach(|| self.inner.recognize(req)).map_err(pipeline_err)?;
        to_py(py, &record)
    }

    #[pyo3(signature = (limit = 50, cursor = None))]
    fn review_queue(&self, py: Python<'_>, limit: usize, cursor: Option<&str>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.review_queue(limit, cursor).map_err(pipeline_err)?)
    }

    #[pyo3(signature = (prediction_id, operator_id = "operator", at = None))]
    fn confirm(&self, py: Python<'_>, prediction_id: &str, operator_id: &str, at: Option<&str>) -> PyResult<Py<PyAny>> {
        let req = ConfirmRequest { operator_id: operator_id.into(), at: parse_time(at)? };
        let outcome = py
            .detach(|| {
                let (outcome, ticket) = self.inner.confirm(prediction_id, req)?;
                self.inner.run_jobs(ticket)?;
                Ok(outcome)
            })
            .map_err(pipeline_err)?;
        to_py(py, &outcome)
    }

    /// `values` maps task names (e.g. "plate_recognition") to corrected values.
    #[pyo3(signature = (prediction_id, values, operator_id = "operator", at = None))]
    fn correct(
        &self,
        py: Python<'_>,
        prediction_id: &str,
        values: BTreeMap<String, String>,
        operator_id: &str,
        at: Option<&str>,
    ) -> PyResult<Py<PyAny>> {
        let values = values
            .into_iter()
            .map(|(k, v)| Ok((serde_json::from_value::<TaskKind>(k.into()).map_err(value_err)?, v)))
            .collect::<PyResult<_>>()?;
        let req = CorrectRequest { values, operator_id: operator_id.into(), at: parse_time(at)? };
        let outcome = py
            .detach(|| {
                let (outcome, ticket) = self.inner.correct(prediction_id, req)?;
                self.inner.run_jobs(ticket)?;
                Ok(outcome)
            })
            .map_err(pipeline_err)?;
        to_py(py, &outcome)
    }

    fn job(&self, py: Python<'_>, job_id: &str) -> PyResult<Option<Py<PyAny>>> {
        self.inner.job(job_id).map(|j| to_py(py, &j)).transpose()
    }

    fn metrics(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.metrics().map_err(pipeline_err)?)
    }

    fn models(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.models().map_err(pipeline_err)?)
    }

    /// Returns `(current, previous)` after the swap.
    fn rollback(&self) -> PyResult<(u64, u64)> {
        let r = self.inner.rollback().map_err(pipeline_err)?;
        Ok((r.current, r.previous))
    }
}

#[pymodule]
fn sentinel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SentinelError", m.py().get_type::<SentinelError>())?;
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(cer, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(combine, m)?)?;
    m.add_function(wrap_pyfunction!(route, m)?)?;
    m.add_function(wrap_pyfunction!(should_train, m)?)?;
    m.add_function(wrap_pyfunction!(lora_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_gate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
