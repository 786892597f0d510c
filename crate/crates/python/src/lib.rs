//! Python bindings for `tilt-core`, importable as `latent_tilt`.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tilt_core::latent_store::{self, Format, SyntheticShiftSpec};
use tilt_core::{classify, episodes, tilting, validate};
use tilt_core::{Embedding, EpisodeSpec, Error, LabeledEmbedding, Mode, MomentConstraint, RunConfig, ScoreKind, Strength};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Stream(_) => PyOSError::new_err(e.to_string()),
        ref other if other.is_usage() => PyValueError::new_err(e.to_string()),
        Error::Format(_) | Error::Corruption { .. } | Error::DimensionMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(text: &str) -> PyResult<T> {
    text.parse().map_err(py_err)
}

fn format_for(path: &std::path::Path, format: Option<&str>) -> PyResult<Format> {
    match format {
        Some(f) => parse(f),
        None => Ok(Format::from_path(path)),
    }
}

/// A labelled embedding dataset.
#[pyclass(name = "EmbeddingSet", module = "latent_tilt", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyEmbeddingSet {
    inner: tilt_core::EmbeddingSet,
}

#[pymethods]
impl PyEmbeddingSet {
    /// Builds a set from row vectors and integer labels; label `num_classes`
    /// marks an unlabeled item.
    #[new]
    fn new(vectors: Vec<Vec<f64>>, labels: Vec<u32>, num_classes: usize) -> PyResult<Self> {
        if vectors.len() != labels.len() {
            return Err(PyValueError::new_err(format!(
                "{} vectors but {} labels",
                vectors.len(),
                labels.len()
            )));
        }
        let dim = vectors.first().map(Vec::len).unwrap_or(0);
        let items = vectors
            .into_iter()
            .zip(labels)
            .map(|(v, label)| {
                Ok(LabeledEmbedding {
                    embedding: Embedding::new(v).map_err(py_err)?,
                    label,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let inner = tilt_core::EmbeddingSet::new(dim, num_classes, items).map_err(py_err)?;
        Ok(PyEmbeddingSet { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, format = None))]
    fn load(path: PathBuf, format: Option<&str>) -> PyResult<Self> {
        let format = format_for(&path, format)?;
        let inner = latent_store::load_dataset(&path, format).map_err(py_err)?;
        Ok(PyEmbeddingSet { inner })
    }

    #[pyo3(signature = (path, format = None))]
    fn save(&self, path: PathBuf, format: Option<&str>) -> PyResult<()> {
        let format = format_for(&path, format)?;
        latent_store::save_dataset(&self.inner, &path, format).map_err(py_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn labels(&self) -> Vec<u32> {
        self.inner.labels().collect()
    }

    fn vectors(&self) -> Vec<Vec<f64>> {
        self.inner.vectors().map(<[f64]>::to_vec).collect()
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts()
    }

    fn __repr__(&self) -> String {
        format!(
            "EmbeddingSet(n={}, dim={}, num_classes={})",
            self.inner.len(),
            self.inner.dim(),
            self.inner.num_classes()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (
    num_classes = 5, dim = 16, per_class = 50, class_mean_scale = 3.0, within_class_std = 1.0,
    prior_shift = None, mean_shift = 0.0, corrupt_fraction = 0.0, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    class_mean_scale: f64,
    within_class_std: f64,
    prior_shift: Option<Vec<f64>>,
    mean_shift: f64,
    corrupt_fraction: f64,
    seed: u64,
) -> PyResult<PyEmbeddingSet> {
    let spec = SyntheticShiftSpec {
        num_classes,
        dim,
        per_class,
        class_mean_scale,
        within_class_std,
        prior_shift,
        mean_shift_magnitude: mean_shift,
        corrupt_fraction,
        seed,
    };
    let inner = latent_store::generate_synthetic(&spec).map_err(py_err)?;
    Ok(PyEmbeddingSet { inner })
}

/// Tilted weights `exp(λ s_i) / Σ_j exp(λ s_j)`.
#[pyfunction]
fn tilt_weights(scores: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    Ok(tilting::tilt_weights(&scores, lam).map_err(py_err)?.weights().to_vec())
}

/// `log((1/n) Σ exp(λ s_i))`.
#[pyfunction]
fn log_partition(scores: Vec<f64>, lam: f64) -> PyResult<f64> {
    tilting::log_partition(&scores, lam).map_err(py_err)
}

/// Tilted mean and variance of the scores.
#[pyfunction]
fn tilted_moments(scores: Vec<f64>, lam: f64) -> PyResult<(f64, f64)> {
    tilting::tilted_moments(&scores, lam).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (scores, target, tol = tilting::DEFAULT_TOL, max_iter = tilting::DEFAULT_MAX_ITER))]
fn solve_lambda(scores: Vec<f64>, target: f64, tol: f64, max_iter: usize) -> PyResult<f64> {
    tilting::solve_lambda(&scores, MomentConstraint { target }, tol, max_iter).map_err(py_err)
}

/// KL divergence of the tilted measure from uniform, `Σ w log(n w)`.
#[pyfunction]
fn kl_to_uniform(scores: Vec<f64>, lam: f64) -> PyResult<f64> {
    Ok(tilting::kl_to_base(&tilting::tilt_weights(&scores, lam).map_err(py_err)?))
}

/// Cosine nearest-prototype classifier with a fixed temperature.
#[pyclass(name = "PrototypeClassifier", module = "latent_tilt", frozen, skip_from_py_object)]
struct PyPrototypeClassifier {
    inner: tilt_core::PrototypeClassifier,
}

#[pymethods]
impl PyPrototypeClassifier {
    /// Prototypes from a labelled support set, optionally weighted.
    #[staticmethod]
    #[pyo3(signature = (support, weights = None, tau = classify::DEFAULT_TAU))]
    fn build(support: &PyEmbeddingSet, weights: Option<Vec<f64>>, tau: f64) -> PyResult<Self> {
        // The multiplier behind caller-supplied weights is unknown.
        let measure = weights
            .map(|w| tilting::TiltedMeasure::from_weights(w, f64::NAN))
            .transpose()
            .map_err(py_err)?;
        let inner = classify::build_prototypes(&support.inner, measure.as_ref(), tau).map_err(py_err)?;
        Ok(PyPrototypeClassifier { inner })
    }

    #[getter]
    fn prototypes(&self) -> Vec<Vec<f64>> {
        self.inner.prototypes().to_vec()
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.inner.temperature()
    }

    fn posterior(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(classify::posterior(&z, &self.inner).map_err(py_err)?.into_inner())
    }

    fn predict(&self, z: Vec<f64>) -> PyResult<usize> {
        classify::predict(&z, &self.inner).map_err(py_err)
    }
}

/// Runs the episodic benchmark and returns a dict with `mean`, `std`,
/// `accuracies` and `seconds`.
#[pyfunction]
#[pyo3(signature = (
    data, mode = "frozen", score = "conf", lam = None, c = None, tau = classify::DEFAULT_TAU,
    ways = 5, shots = 5, queries = 15, episodes = 100, seed = 0, knn_k = 1, workers = 1
))]
#[allow(clippy::too_many_arguments)]
fn run_benchmark<'py>(
    py: Python<'py>,
    data: &PyEmbeddingSet,
    mode: &str,
    score: &str,
    lam: Option<f64>,
    c: Option<f64>,
    tau: f64,
    ways: usize,
    shots: usize,
    queries: usize,
    episodes: usize,
    seed: u64,
    knn_k: usize,
    workers: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let strength = match (lam, c) {
        (Some(_), Some(_)) => return Err(PyValueError::new_err("give either lam or c, not both")),
        (_, Some(c)) => Strength::Target(c),
        (lam, None) => Strength::Lambda(lam.unwrap_or(1.0)),
    };
    let cfg = RunConfig {
        mode: parse::<Mode>(mode)?,
        score: parse::<ScoreKind>(score)?,
        strength,
        tau,
        knn_k,
        episodes,
        ..RunConfig::default()
    };
    let spec = EpisodeSpec {
        ways,
        shots,
        queries_per_class: queries,
        seed,
    };
    let inner = &data.inner;
    let result = py
        .detach(|| episodes::run_benchmark(inner, &spec, &cfg, workers))
        .map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("mean", result.mean)?;
    out.set_item("std", result.std)?;
    out.set_item("accuracies", result.accuracies)?;
    out.set_item("seconds", result.seconds)?;
    Ok(out)
}

/// Runs the randomized theory checks; returns `(name, passed, detail)`
/// tuples.
#[pyfunction]
#[pyo3(signature = (seed = 0, quick = true))]
fn validate_theory(py: Python<'_>, seed: u64, quick: bool) -> Vec<(String, bool, String)> {
    let budget = if quick {
        validate::Budget::quick()
    } else {
        validate::Budget::full()
    };
    py.detach(|| validate::run_all(seed, budget))
        .into_iter()
        .map(|o| (o.name.to_string(), o.passed, o.detail))
        .collect()
}

#[pymodule]
fn latent_tilt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEmbeddingSet>()?;
    m.add_class::<PyPrototypeClassifier>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(tilt_weights, m)?)?;
    m.add_function(wrap_pyfunction!(log_partition, m)?)?;
    m.add_function(wrap_pyfunction!(tilted_moments, m)?)?;
    m.add_function(wrap_pyfunction!(solve_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(kl_to_uniform, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(validate_theory, m)?)?;
    Ok(())
}
