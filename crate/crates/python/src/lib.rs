//! Python bindings: experiment runs, the label pool and the scalar metrics.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cil::config::{ExperimentConfig, Method};
use cil::harness::{load_stream, run_sequence, Environment, RunReport};
use cil::label_pool::FrozenEmbedder;
use cil::seq2seq::Vocabulary;
use cil::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::Protocol(_) | Error::Checkpoint(_) | Error::Json(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_method(name: &str) -> PyResult<Method> {
    name.parse::<Method>().map_err(py_err)
}

/// Experiment configuration; see the TOML schema in the README.
#[pyclass(name = "Config", module = "labelcil")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: ExperimentConfig::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::from_toml(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(&path).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.seeds = seeds;
        next.validate().map_err(py_err)?;
        self.inner = next;
        Ok(())
    }

    #[getter]
    fn methods(&self) -> Vec<String> {
        self.inner.methods.iter().map(|m| m.name().to_string()).collect()
    }

    #[setter]
    fn set_methods(&mut self, methods: Vec<String>) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.methods = methods.iter().map(|m| parse_method(m)).collect::<PyResult<_>>()?;
        next.validate().map_err(py_err)?;
        self.inner = next;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!("Config(methods={:?}, seeds={:?})", self.methods(), self.inner.seeds)
    }
}

#[pyclass(name = "RunReport", module = "labelcil", frozen)]
struct PyRunReport {
    inner: RunReport,
}

#[pymethods]
impl PyRunReport {
    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn final_accuracy(&self) -> f64 {
        self.inner.final_accuracy
    }

    #[getter]
    fn last_task_bias(&self) -> f64 {
        self.inner.last_task_bias
    }

    /// Lower-triangular: `accuracy[t][i]` after training task `t`.
    #[getter]
    fn accuracy(&self) -> Vec<Vec<f64>> {
        self.inner.accuracy.rows().to_vec()
    }

    /// Before any task, then after each task.
    #[getter]
    fn nc(&self) -> Vec<f64> {
        self.inner.nc.clone()
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    #[getter]
    fn confusion(&self) -> Vec<Vec<u64>> {
        self.inner.confusion.rows().to_vec()
    }

    #[getter]
    fn fallbacks(&self) -> usize {
        self.inner.fallbacks
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "RunReport(method={:?}, seed={}, final_accuracy={:.4})",
            self.method(),
            self.inner.seed,
            self.inner.final_accuracy
        )
    }
}

/// Runs one method on one seed of the configured stream.
#[pyfunction]
fn run(py: Python<'_>, config: &PyConfig, seed: u64, method: &str) -> PyResult<PyRunReport> {
    let m = parse_method(method)?;
    let cfg = config.inner.clone();
    let report = py.detach(move || -> cil::Result<RunReport> {
        let (stream, corpus) = load_stream(&cfg, seed)?;
        let env = Environment::prepare(&stream, &corpus, &cfg, seed)?;
        run_sequence(&stream, &env, &cfg.train, m, seed)
    });
    Ok(PyRunReport {
        inner: report.map_err(py_err)?,
    })
}

/// Every configured method on every configured seed, seed-major.
#[pyfunction]
fn run_all(py: Python<'_>, config: &PyConfig) -> PyResult<Vec<PyRunReport>> {
    let cfg = config.inner.clone();
    let reports = py.detach(move || -> cil::Result<Vec<RunReport>> {
        let mut out = vec![];
        for &seed in &cfg.seeds {
            let (stream, corpus) = load_stream(&cfg, seed)?;
            let env = Environment::prepare(&stream, &corpus, &cfg, seed)?;
            for &m in &cfg.methods {
                out.push(run_sequence(&stream, &env, &cfg.train, m, seed)?);
            }
        }
        Ok(out)
    });
    Ok(reports
        .map_err(py_err)?
        .into_iter()
        .map(|inner| PyRunReport { inner })
        .collect())
}

/// `(text, label, split)` triples of the configured synthetic benchmark.
#[pyfunction]
fn generate_synthetic(config: &PyConfig) -> PyResult<Vec<(String, String, String)>> {
    let data = cil::data::generate_synthetic(&config.inner.data.synthetic).map_err(py_err)?;
    Ok(data
        .records
        .into_iter()
        .map(|r| {
            let split = r.split.map(|s| format!("{s:?}").to_lowercase()).unwrap_or_default();
            (r.text, r.label, split)
        })
        .collect())
}

/// Softmax over `logits` restricted to the ids in `allowed`; zero elsewhere.
#[pyfunction]
fn masked_distribution(logits: Vec<f64>, allowed: Vec<usize>) -> PyResult<Vec<f64>> {
    let mut mask = vec![false; logits.len()];
    for id in allowed {
        *mask
            .get_mut(id)
            .ok_or_else(|| PyValueError::new_err(format!("id {id} outside {} logits", logits.len())))? = true;
    }
    cil::objective::restricted_softmax(&logits, &mask).map_err(py_err)
}

#[pyfunction]
fn nc_metric(features: Vec<Vec<f64>>, classes: Vec<usize>) -> PyResult<f64> {
    let bundle = cil::metrics::FeatureBundle::new(features, classes).map_err(py_err)?;
    cil::metrics::nc_metric(&bundle).map_err(py_err)
}

#[pyfunction]
fn lpr_sample_count(lam: f64, n: usize) -> PyResult<usize> {
    cil::replay::lpr_sample_count(lam, n).map_err(py_err)
}

#[pyfunction]
fn buffer_quota(p: f64, n: usize) -> PyResult<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(PyValueError::new_err(format!("buffer fraction {p} outside [0, 1]")));
    }
    Ok(cil::harness::buffer_quota(p, n))
}

#[pyfunction]
fn insertion_count(n: usize) -> usize {
    cil::replay::insertion_count(n)
}

/// Closed set of label phrases with cosine retrieval.
#[pyclass(name = "LabelPool", module = "labelcil")]
struct PyLabelPool {
    vocab: Vocabulary,
    pool: cil::label_pool::LabelPool,
}

#[pymethods]
impl PyLabelPool {
    #[new]
    #[pyo3(signature = (labels, dim = 64, seed = 17))]
    fn new(labels: Vec<String>, dim: usize, seed: u64) -> PyResult<Self> {
        let vocab = Vocabulary::build(labels.iter().map(String::as_str));
        let embedder = FrozenEmbedder::new(vocab.len(), dim, seed).map_err(py_err)?;
        let mut pool = cil::label_pool::LabelPool::new(Arc::new(embedder));
        pool.add_labels(&labels, 1, &vocab).map_err(py_err)?;
        Ok(Self { vocab, pool })
    }

    /// `(label, score, fallback)` for a generated phrase.
    fn retrieve(&self, generated: &str) -> PyResult<(String, f64, bool)> {
        let r = self.pool.retrieve(&self.vocab.encode(generated)).map_err(py_err)?;
        Ok((self.pool.entries()[r.index].text.clone(), r.score, r.fallback))
    }

    fn labels(&self) -> Vec<String> {
        self.pool.entries().iter().map(|e| e.text.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.pool.len()
    }
}

#[pymodule]
fn labelcil(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRunReport>()?;
    m.add_class::<PyLabelPool>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(masked_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(nc_metric, m)?)?;
    m.add_function(wrap_pyfunction!(lpr_sample_count, m)?)?;
    m.add_function(wrap_pyfunction!(buffer_quota, m)?)?;
    m.add_function(wrap_pyfunction!(insertion_count, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
