//! Python module `gmr`: checkpoints, inference, sampling and the experiment runner.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gmr_core::classifier::ControlNormalization;
use gmr_core::config::ExperimentConfig;
use gmr_core::gmm::{gmr_parameter_count, SampleNoise};
use gmr_core::{checkpoint, harness, replay};

fn err(e: gmr_core::GmrError) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_array(rows: Vec<Vec<f64>>, dim: usize) -> PyResult<Array2<f64>> {
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(PyValueError::new_err(format!("expected rows of length {dim}, got {}", bad.len())));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, dim), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn parse_normalization(name: &str) -> PyResult<ControlNormalization> {
    match name {
        "softmax" => Ok(ControlNormalization::Softmax),
        "shift" => Ok(ControlNormalization::Shift),
        other => Err(PyValueError::new_err(format!("unknown normalization '{other}'"))),
    }
}

fn to_rows(a: Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// A trained generator plus classifier.
#[pyclass(name = "Model", module = "gmr")]
struct PyModel {
    inner: replay::GmrModel,
}

#[pymethods]
impl PyModel {
    /// Fresh, untrained model with default settings.
    #[new]
    #[pyo3(signature = (dim, classes, components=100, seed=0))]
    fn new(dim: usize, classes: usize, components: usize, seed: u64) -> Self {
        let settings = replay::GmrSettings { components, ..replay::GmrSettings::default() };
        Self { inner: replay::GmrModel::new(dim, classes, &settings, seed) }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: checkpoint::load(path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, path).map_err(err)
    }

    #[getter]
    fn components(&self) -> usize {
        self.inner.gmm.components()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.gmm.dim()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classifier.classes()
    }

    fn weights(&self) -> Vec<f64> {
        self.inner.gmm.weights().to_vec()
    }

    fn centroids(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.gmm.centroids.clone())
    }

    fn responsibilities(&self, images: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = to_array(images, self.dim())?;
        Ok(to_rows(self.inner.responsibilities(x.view())))
    }

    fn log_likelihoods(&self, images: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = to_array(images, self.dim())?;
        Ok(self.inner.log_likelihoods(x.view()))
    }

    fn predict(&self, images: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let x = to_array(images, self.dim())?;
        Ok(self.inner.predict(x.view()))
    }

    /// Unconditional samples and the components they came from.
    #[pyo3(signature = (count, seed=0))]
    fn sample(&self, count: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, ks) = self.inner.gmm.sample(count, None, SampleNoise::Gaussian, &mut rng).map_err(err)?;
        Ok((to_rows(x), ks))
    }

    /// One sample per entry of `classes`, steered by the inverted classifier.
    /// `normalization` is `"softmax"` or `"shift"`.
    #[pyo3(signature = (classes, seed=0, confidence=0.95, normalization="softmax"))]
    fn sample_classes(
        &self,
        classes: Vec<usize>,
        seed: u64,
        confidence: f64,
        normalization: &str,
    ) -> PyResult<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let control = parse_normalization(normalization)?;
        let x = replay::generate_conditional(&self.inner, &classes, confidence, control, &mut rng, SampleNoise::Gaussian)
            .map_err(err)?;
        Ok(to_rows(x))
    }

    /// Control signal (mixture weights) for `class`.
    #[pyo3(signature = (class, confidence=0.95, normalization="softmax"))]
    fn control_signal(&self, class: usize, confidence: f64, normalization: &str) -> PyResult<Vec<f64>> {
        let control = parse_normalization(normalization)?;
        Ok(self.inner.classifier.invert_for_class(class, confidence, control).map_err(err)?.weights.to_vec())
    }

    fn __repr__(&self) -> String {
        format!("Model(components={}, dim={}, classes={})", self.components(), self.dim(), self.classes())
    }
}

/// Experiment configuration; keys as in the `key = value` config files.
#[pyclass(name = "Config", module = "gmr")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => ExperimentConfig::from_file(p).map_err(err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }
}

/// Runs every repetition of `config`, writing artifacts to `out`. Returns
/// `(run_id, seed, max_accuracy)` per run.
#[pyfunction]
fn run_config(py: Python<'_>, config: &PyConfig, out: PathBuf) -> PyResult<Vec<(String, u64, f64)>> {
    let cfg = config.inner.clone();
    let results = py
        .detach(move || {
            let data = harness::load_data(&cfg)?;
            harness::run_config(&cfg, &data, &out)
        })
        .map_err(err)?;
    Ok(results.into_iter().map(|r| (r.run_id, r.seed, r.max_accuracy)).collect())
}

/// Number of stored parameters of a GMR model.
#[pyfunction]
fn parameter_count(dim: usize, components: usize, classes: usize) -> usize {
    gmr_parameter_count(dim, components, classes)
}

#[pymodule]
fn gmr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(parameter_count, m)?)?;
    Ok(())
}
