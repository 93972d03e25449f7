//! Python bindings for `cdcr_core`.
//!
//! Matrices cross the boundary as lists of lists; label matrices as lists
//! of 0/1 rows. Training options are keyword arguments with the same names
//! as the JSON experiment config.

use std::path::PathBuf;

use cdcr_core::classifier::{Checkpoint, Classifier};
use cdcr_core::cli::ExperimentConfig;
use cdcr_core::curriculum;
use cdcr_core::datagen::{self, DatasetSpec};
use cdcr_core::metrics;
use cdcr_core::numeric::{LabelMatrix, Matrix};
use cdcr_core::trainer::{self, TrainOutcome};
use cdcr_core::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Aborted { .. } | Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py)
}

fn labels(rows: Vec<Vec<u8>>) -> PyResult<LabelMatrix> {
    LabelMatrix::from_rows(&rows).map_err(to_py)
}

fn label_rows(m: &LabelMatrix) -> Vec<Vec<i64>> {
    (0..m.rows()).map(|i| m.row(i).iter().map(|&b| i64::from(b)).collect()).collect()
}

/// Serializes a Python value with the standard `json` module.
fn dumps(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<String> {
    py.import("json")?.call_method1("dumps", (value,))?.extract()
}

fn loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// A synthetic partial multi-label dataset with a clean test split.
#[pyclass(name = "Dataset", module = "cdcr", frozen)]
struct PyDataset {
    inner: datagen::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Generates a dataset. Omitted fields take the standard desk values.
    #[staticmethod]
    #[pyo3(signature = (q, seed=0, n_train=2000, n_test=1000, n_features=32, n_classes=20,
                        avg_positives=1.6, class_frequency_skew=0.0, concept_noise_std=0.0))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        py: Python<'_>,
        q: f64,
        seed: u64,
        n_train: usize,
        n_test: usize,
        n_features: usize,
        n_classes: usize,
        avg_positives: f64,
        class_frequency_skew: f64,
        concept_noise_std: f64,
    ) -> PyResult<Self> {
        let spec = DatasetSpec {
            n_train,
            n_test,
            n_features,
            n_classes,
            avg_positives,
            class_frequency_skew,
            concept_noise_std,
            seed,
        };
        let inner = py.detach(|| datagen::Dataset::synthesize(&spec, q)).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: datagen::Dataset::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn n_test(&self) -> usize {
        self.inner.test.len()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn q(&self) -> f64 {
        self.inner.train.flip_rate
    }

    fn train_features(&self) -> Vec<Vec<f64>> {
        self.inner.train.features().to_rows()
    }

    fn candidates(&self) -> Vec<Vec<i64>> {
        label_rows(&self.inner.train.candidates)
    }

    fn true_labels(&self) -> Vec<Vec<i64>> {
        label_rows(self.inner.train.true_labels())
    }

    fn test_features(&self) -> Vec<Vec<f64>> {
        self.inner.test.features.to_rows()
    }

    fn test_labels(&self) -> Vec<Vec<i64>> {
        label_rows(&self.inner.test.true_labels)
    }

    /// Fraction of each class's candidate labels that are false positives.
    fn noise_rate_per_class(&self) -> Vec<f64> {
        datagen::noise_rate_per_class(&self.inner.train)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n_train={}, n_test={}, n_features={}, n_classes={}, q={})",
            self.n_train(),
            self.n_test(),
            self.n_features(),
            self.n_classes(),
            self.q()
        )
    }
}

/// A trained classifier.
#[pyclass(name = "Model", module = "cdcr", frozen)]
struct PyModel {
    inner: Classifier,
}

#[pymethods]
impl PyModel {
    /// Class probabilities for each row of `features`.
    fn predict(&self, py: Python<'_>, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(features)?;
        py.detach(|| trainer::predict(&self.inner, &x))
            .map(|p| p.to_rows())
            .map_err(to_py)
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes().to_vec()
    }

    /// Loads a checkpoint; `ema=True` returns the averaged parameters.
    #[staticmethod]
    #[pyo3(signature = (path, ema=true))]
    fn from_checkpoint(path: PathBuf, ema: bool) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        Ok(PyModel {
            inner: if ema { ck.ema.model() } else { ck.model },
        })
    }
}

/// Result of `train`.
#[pyclass(name = "TrainResult", module = "cdcr", frozen)]
struct PyTrainResult {
    outcome: TrainOutcome,
}

#[pymethods]
impl PyTrainResult {
    /// The EMA model, which is what the history's test metrics evaluate.
    #[getter]
    fn model(&self) -> PyModel {
        PyModel {
            inner: self.outcome.ema.model(),
        }
    }

    #[getter]
    fn raw_model(&self) -> PyModel {
        PyModel {
            inner: self.outcome.model.clone(),
        }
    }

    /// One dict per epoch.
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let text = serde_json::to_string(&self.outcome.history.records).expect("history serializes");
        loads(py, &text)
    }

    fn final_metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let text = serde_json::to_string(&self.outcome.final_record().test).expect("report serializes");
        loads(py, &text)
    }

    /// Final identified labels as 0/1 rows.
    fn weights(&self) -> Vec<Vec<i64>> {
        label_rows(&self.outcome.weights)
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        self.outcome.checkpoint().save(&path).map_err(to_py)
    }

    fn summary_csv(&self) -> String {
        self.outcome.history.summary_csv()
    }
}

/// Trains on `dataset`. Keyword arguments are experiment config fields,
/// e.g. `method="CDCR", epochs=60, alpha=0.8`.
#[pyfunction]
#[pyo3(signature = (dataset, **options))]
fn train(py: Python<'_>, dataset: &PyDataset, options: Option<&Bound<'_, PyDict>>) -> PyResult<PyTrainResult> {
    let config: ExperimentConfig = match options {
        Some(o) => serde_json::from_str(&dumps(py, o.as_any())?).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    let config = config.train_config();
    let data = &dataset.inner;
    let outcome = py.detach(|| trainer::train(config, data)).map_err(to_py)?;
    Ok(PyTrainResult { outcome })
}

/// Multi-label metrics as a dict.
#[pyfunction]
#[pyo3(signature = (probs, truth, threshold=0.5))]
fn evaluate<'py>(
    py: Python<'py>,
    probs: Vec<Vec<f64>>,
    truth: Vec<Vec<u8>>,
    threshold: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let report = metrics::evaluate(&matrix(probs)?, &labels(truth)?, threshold).map_err(to_py)?;
    loads(py, &serde_json::to_string(&report).expect("report serializes"))
}

/// Average precision, or None when `labels` has no positives.
#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err(format!(
            "scores has {} entries but labels has {}",
            scores.len(),
            labels.len()
        )));
    }
    Ok(metrics::average_precision(&scores, &labels))
}

/// Threshold rule: candidates with probability at least `alpha`.
#[pyfunction]
fn estimate_weights(probs: Vec<Vec<f64>>, candidates: Vec<Vec<u8>>, alpha: f64) -> PyResult<Vec<Vec<i64>>> {
    let w = curriculum::estimate_weights(&matrix(probs)?, &labels(candidates)?, alpha).map_err(to_py)?;
    Ok(label_rows(&w))
}

/// Difficulty-adjusted rule with baselines computed from `probs`.
#[pyfunction]
fn estimate_weights_difficulty(probs: Vec<Vec<f64>>, candidates: Vec<Vec<u8>>, alpha: f64) -> PyResult<Vec<Vec<i64>>> {
    let (p, c) = (matrix(probs)?, labels(candidates)?);
    let b = curriculum::compute_baselines(&p, &c).map_err(to_py)?;
    let w = curriculum::estimate_weights_difficulty(&p, &c, alpha, &b).map_err(to_py)?;
    Ok(label_rows(&w))
}

/// Per-class baselines and the pooled baseline.
#[pyfunction]
fn compute_baselines(probs: Vec<Vec<f64>>, candidates: Vec<Vec<u8>>) -> PyResult<(Vec<f64>, f64)> {
    let b = curriculum::compute_baselines(&matrix(probs)?, &labels(candidates)?).map_err(to_py)?;
    Ok((b.b, b.b_bar))
}

#[pymodule]
fn cdcr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_weights, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_weights_difficulty, m)?)?;
    m.add_function(wrap_pyfunction!(compute_baselines, m)?)?;
    Ok(())
}
