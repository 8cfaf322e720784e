use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use dmd_core::analytics::{frechet as frechet_distance, stats_of_rows};
use dmd_core::checkpoint::Checkpoint;
use dmd_core::config::ExperimentConfig;
use dmd_core::gan::sample;
use dmd_core::run::RunOptions;
use dmd_core::{Error, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::InvalidRatio(_) | Error::Invalid(_) | Error::LayerIndex { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::MissingArtifact(_) => PyFileNotFoundError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Hands a serializable value to Python as plain dicts and lists.
fn json<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.shape().first().copied().unwrap_or(0).max(1);
    t.data().chunks(t.numel() / n).map(<[f64]>::to_vec).collect()
}

/// Experiment configuration in the `key = value` format of the CLI.
#[pyclass(name = "Config")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => ExperimentConfig::parse_text(t).map_err(to_py)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(&path).map_err(to_py)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    #[getter]
    fn strategy(&self) -> String {
        self.inner.strategy.to_string()
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.steps
    }

    #[getter]
    fn out(&self) -> PathBuf {
        self.inner.out.clone()
    }

    #[setter]
    fn set_out(&mut self, out: PathBuf) {
        self.inner.out = out;
    }

    fn __repr__(&self) -> String {
        format!("Config(strategy={}, steps={})", self.inner.strategy, self.inner.steps)
    }
}

/// Step-by-step access to one training run.
#[pyclass(name = "Trainer")]
struct PyTrainer {
    inner: dmd_core::trainer::Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: dmd_core::trainer::Trainer::new(&config.inner, seed).map_err(to_py)?,
        })
    }

    /// Rebuilds a trainer from `checkpoint()` text.
    #[staticmethod]
    fn resume(config: &PyConfig, checkpoint: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::parse(checkpoint).map_err(to_py)?;
        Ok(Self {
            inner: dmd_core::trainer::Trainer::resume(&config.inner, &ckpt).map_err(to_py)?,
        })
    }

    /// One training step; returns losses and the detection, if any.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let out = self.inner.step().map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("step", out.step)?;
        d.set_item("d_loss", out.d_loss)?;
        d.set_item("g_loss", out.g_loss)?;
        d.set_item("masked", out.masked)?;
        if let Some((_, record)) = &out.detection {
            d.set_item("detection", json(py, record)?)?;
        }
        Ok(d)
    }

    fn run_until(&mut self, step: u64) -> PyResult<()> {
        self.inner.run_until(step, |_, _| Ok(())).map_err(to_py)
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.inner.step_count()
    }

    #[getter]
    fn mask_fraction(&self) -> f64 {
        self.inner.engine.masked_fraction()
    }

    #[getter]
    fn toggles(&self) -> u64 {
        self.inner.engine.toggles()
    }

    fn param_hash(&self) -> String {
        self.inner.param_hash()
    }

    /// `n` generator samples as a list of flattened rows.
    fn samples(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&sample(&self.inner.gen, n, seed).map_err(to_py)?))
    }

    /// Discriminator probabilities for a batch of flattened rows.
    fn probabilities(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let n = x.len();
        let mut shape = vec![n];
        shape.extend(self.inner.disc.data.dims());
        let t = Tensor::new(shape, x.into_iter().flatten().collect()).map_err(to_py)?;
        self.inner.disc.probabilities(&t).map_err(to_py)
    }

    fn checkpoint(&self) -> String {
        self.inner.checkpoint().to_text()
    }
}

/// Trains one seed and writes every artifact; returns the run summary.
#[pyfunction]
#[pyo3(signature = (config, seed, label = None, stop_at = None, resume = false))]
fn run_experiment<'py>(
    py: Python<'py>,
    config: &PyConfig,
    seed: u64,
    label: Option<String>,
    stop_at: Option<u64>,
    resume: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = RunOptions {
        label,
        resume,
        stop_at,
        ..RunOptions::default()
    };
    let summary = dmd_core::run::run_experiment(&config.inner, seed, &opts).map_err(to_py)?;
    json(py, &summary)
}

/// Recomputes analytics from a run's snapshots; returns the output directory.
#[pyfunction]
fn analyze(run: PathBuf) -> PyResult<PathBuf> {
    dmd_core::run::analyze(&run).map_err(to_py)
}

/// Aggregates runs below `roots` and writes `report.json` / `report.md` to `out`.
#[pyfunction]
fn report<'py>(py: Python<'py>, roots: Vec<PathBuf>, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let r = dmd_core::report::emit_report(&roots, &out).map_err(to_py)?;
    json(py, &r)
}

/// Fréchet distance between the Gaussian fits of two sample sets.
#[pyfunction]
fn frechet(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let sa = stats_of_rows(&a, (0, 0)).map_err(to_py)?;
    let sb = stats_of_rows(&b, (0, 0)).map_err(to_py)?;
    frechet_distance(&sa, &sb).map_err(to_py)
}

/// Binary mask with exactly `round(ratio * numel)` zeros, flattened.
#[pyfunction]
fn sample_mask(shape: Vec<usize>, ratio: f64, seed: u64) -> PyResult<Vec<f64>> {
    let m = dmd_core::engine::sample_mask(0, &shape, ratio, seed).map_err(to_py)?;
    Ok(m.mask.data().to_vec())
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("vectors differ in length"));
    }
    Ok(dmd_core::engine::cosine(&a, &b))
}

#[pymodule]
fn dmd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(frechet, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mask, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    Ok(())
}
