//! Python bindings for `streamal-core`.
//!
//! Configuration mistakes raise `ValueError`; every other failure raises
//! `RuntimeError`.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use streamal_core::active::{self, FilterState};
use streamal_core::datagen::{generate_scenario, stream_to_csv, FeatureVector, ScenarioConfig};
use streamal_core::harness::{run_stream, RunConfig};
use streamal_core::heads::MultiHeadClassifier;
use streamal_core::metrics::{self, QueryDecision};
use streamal_core::pacbayes;
use streamal_core::Error;

fn to_py(err: Error) -> PyErr {
    if err.is_config_error() {
        PyValueError::new_err(err.to_string())
    } else {
        PyRuntimeError::new_err(err.to_string())
    }
}

fn features(x: Vec<f64>) -> PyResult<FeatureVector> {
    FeatureVector::new(x).map_err(to_py)
}

/// Default run configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_toml_string().map_err(to_py)
}

/// Runs a stream from a TOML configuration and returns the metrics report
/// as JSON. Artifacts are written to `out_dir` when given.
#[pyfunction]
#[pyo3(signature = (config_toml, out_dir=None))]
fn run(py: Python<'_>, config_toml: &str, out_dir: Option<PathBuf>) -> PyResult<String> {
    let cfg = RunConfig::from_toml_str(config_toml).map_err(to_py)?;
    let out = py
        .detach(|| run_stream(&cfg, out_dir.as_deref()))
        .map_err(to_py)?;
    out.report.to_json().map_err(to_py)
}

/// Generates a scenario stream and returns it as CSV text.
#[pyfunction]
#[pyo3(signature = (scenario_toml="", seed=None))]
fn generate_stream(scenario_toml: &str, seed: Option<u64>) -> PyResult<String> {
    let cfg = ScenarioConfig::from_toml_str(scenario_toml, seed).map_err(to_py)?;
    let demos = generate_scenario(&cfg).map_err(to_py)?;
    stream_to_csv(&demos).map_err(to_py)
}

/// Expected calibration error of `(confidence, correct)` pairs.
#[pyfunction]
#[pyo3(signature = (confidences, correct, bins=15))]
fn ece(confidences: Vec<f64>, correct: Vec<bool>, bins: usize) -> PyResult<f64> {
    if confidences.len() != correct.len() {
        return Err(PyValueError::new_err(
            "confidences and correct differ in length",
        ));
    }
    let rows: Vec<(f64, bool)> = confidences.into_iter().zip(correct).collect();
    metrics::ece(&rows, bins).map_err(to_py)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auc(&scores, &labels).map_err(to_py)
}

/// Fraction of decisions that queried exactly when the prediction was wrong.
#[pyfunction]
fn query_success_rate(queried: Vec<bool>, prediction_correct: Vec<bool>) -> PyResult<f64> {
    if queried.len() != prediction_correct.len() {
        return Err(PyValueError::new_err(
            "queried and prediction_correct differ in length",
        ));
    }
    let decisions: Vec<QueryDecision> = queried
        .into_iter()
        .zip(prediction_correct)
        .map(|(queried, prediction_correct)| QueryDecision {
            queried,
            prediction_correct,
        })
        .collect();
    metrics::query_success_rate(&decisions).map_err(to_py)
}

#[pyfunction]
fn mcallester_bound(emp_risk: f64, kl: f64, n: usize, epsilon: f64) -> f64 {
    pacbayes::mcallester_bound(emp_risk, kl, n, epsilon)
}

#[pyfunction]
fn normalized_entropy(p: f64) -> f64 {
    active::normalized_entropy(p)
}

fn prob_matrix(probs: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let rows = probs.len();
    let cols = probs.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || probs.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(
            "probs must be a non-empty rectangular list of samples x candidates",
        ));
    }
    Ok(DMatrix::from_fn(rows, cols, |r, c| probs[r][c]))
}

/// BALD score per candidate from a samples x candidates probability table.
#[pyfunction]
fn bald_scores(probs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(active::bald_scores_from_probs(&prob_matrix(probs)?))
}

/// Greedy BatchBALD selection. Returns the chosen indices and the joint
/// mutual information after each pick.
#[pyfunction]
#[pyo3(signature = (probs, batch_size, exact_limit=12, joint_samples=4096, seed=0))]
fn batchbald(
    probs: Vec<Vec<f64>>,
    batch_size: usize,
    exact_limit: usize,
    joint_samples: usize,
    seed: u64,
) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let sel = active::batchbald_from_probs(
        &prob_matrix(probs)?,
        batch_size,
        exact_limit,
        joint_samples,
        seed,
    )
    .map_err(to_py)?;
    Ok((sel.indices, sel.joint_mi))
}

/// Temporal log-odds filter over per-frame probabilities.
#[pyclass(name = "LogOddsFilter")]
struct PyFilter {
    state: FilterState,
}

#[pymethods]
impl PyFilter {
    #[new]
    #[pyo3(signature = (prior_p=0.5))]
    fn new(prior_p: f64) -> Self {
        Self {
            state: FilterState::new(prior_p),
        }
    }

    /// Folds in one frame and returns the filtered probability.
    fn update(&mut self, p: f64) -> f64 {
        self.state = active::filter_update(self.state, p);
        self.state.probability()
    }

    #[getter]
    fn probability(&self) -> f64 {
        self.state.probability()
    }

    #[getter]
    fn log_odds(&self) -> f64 {
        self.state.log_odds
    }

    #[getter]
    fn frames(&self) -> usize {
        self.state.frames
    }
}

/// A multi-head classifier loaded from a checkpoint directory.
#[pyclass(name = "Classifier")]
struct PyClassifier {
    inner: MultiHeadClassifier,
}

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = MultiHeadClassifier::load_checkpoint(&path).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(&path).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn class_ids(&self) -> Vec<u32> {
        self.inner.class_ids()
    }

    /// Winning class and its probability.
    fn predict(&self, x: Vec<f64>) -> PyResult<(u32, f64)> {
        self.inner.predict(&features(x)?).map_err(to_py)
    }

    /// `(class_id, probability)` for every trained head.
    fn predict_all(&self, x: Vec<f64>) -> PyResult<Vec<(u32, f64)>> {
        self.inner.predict_all(&features(x)?).map_err(to_py)
    }
}

#[pymodule]
fn streamal(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(generate_stream, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(query_success_rate, m)?)?;
    m.add_function(wrap_pyfunction!(mcallester_bound, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(bald_scores, m)?)?;
    m.add_function(wrap_pyfunction!(batchbald, m)?)?;
    m.add_class::<PyFilter>()?;
    m.add_class::<PyClassifier>()?;
    Ok(())
}
