//! Python bindings: models, datasets, training and the analysis helpers.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use turboconn::analysis;
use turboconn::evalkit::{self, EvalOptions};
use turboconn::model::{read_checkpoint, write_checkpoint, ConnectionSpec, GenerateOptions, Model};
use turboconn::tasks::{self, Sample, Vocab};
use turboconn::trainer::{self, TrainConfig, Trainer};
use turboconn::Error;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::NonFinite { .. } | Error::Diverged { .. } => PyArithmeticError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for turboconn::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// One prompt/completion pair.
#[pyclass(name = "Sample", from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: Sample,
}

#[pymethods]
impl PySample {
    #[new]
    fn new(prompt: String, completion: String) -> PyResult<Self> {
        Ok(PySample {
            inner: Sample::new(prompt, completion, &Vocab::standard()).py()?,
        })
    }

    #[getter]
    fn prompt(&self) -> &str {
        &self.inner.prompt
    }

    #[getter]
    fn completion(&self) -> &str {
        &self.inner.completion
    }

    /// Sequence length (parity) or operand count (arithmetic).
    #[getter]
    fn length(&self) -> usize {
        self.inner.length()
    }

    fn ids(&self) -> Vec<usize> {
        self.inner.ids()
    }

    fn __repr__(&self) -> String {
        format!(
            "Sample(prompt={:?}, completion={:?})",
            self.inner.prompt, self.inner.completion
        )
    }
}

fn unwrap_samples(samples: &[PySample]) -> Vec<Sample> {
    samples.iter().map(|s| s.inner.clone()).collect()
}

fn wrap_samples(samples: Vec<Sample>) -> Vec<PySample> {
    samples.into_iter().map(|inner| PySample { inner }).collect()
}

/// The character vocabulary shared by every task.
#[pyclass(name = "Vocab")]
struct PyVocab {
    inner: Vocab,
}

#[pymethods]
impl PyVocab {
    #[new]
    fn new() -> Self {
        PyVocab {
            inner: Vocab::standard(),
        }
    }

    fn encode(&self, text: &str) -> PyResult<Vec<usize>> {
        self.inner.encode(text).py()
    }

    fn decode(&self, ids: Vec<usize>) -> PyResult<String> {
        self.inner.decode(&ids).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A decoder with optional downward connections.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        n_layers = 4, d_hidden = 128, n_heads = 4, d_inter = 256, max_seq = 256,
        connections = Vec::new(), alpha = 1.0, g = 1, rank_d = 16, seed = 0, vocab_size = None,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_layers: usize,
        d_hidden: usize,
        n_heads: usize,
        d_inter: usize,
        max_seq: usize,
        connections: Vec<(usize, usize)>,
        alpha: f32,
        g: usize,
        rank_d: usize,
        seed: u64,
        vocab_size: Option<usize>,
    ) -> PyResult<Self> {
        let config = turboconn::model::ModelConfig {
            n_layers,
            d_hidden,
            n_heads,
            d_kv: d_hidden,
            d_inter,
            vocab_size: vocab_size.unwrap_or_else(|| Vocab::standard().len()),
            max_seq,
        };
        let spec = if connections.is_empty() {
            ConnectionSpec::none()
        } else {
            ConnectionSpec::new(connections, alpha, g, rank_d).py()?
        };
        Ok(PyModel {
            inner: Model::new(config, spec, seed).py()?,
        })
    }

    /// Load the model stored in a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: read_checkpoint(path).py()?.model,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_checkpoint(path, &self.inner, None, &[]).py()
    }

    /// Logits `[k][vocab]` for one token sequence.
    fn forward(&self, tokens: Vec<usize>) -> PyResult<Vec<Vec<f32>>> {
        let v = self.inner.config().vocab_size;
        let t = self.inner.forward_grouped(&tokens).py()?;
        Ok(t.data().chunks_exact(v).map(<[f32]>::to_vec).collect())
    }

    /// Logits with soft-token feedback of weight `lam`.
    fn forward_soft_token(&self, tokens: Vec<usize>, lam: f32) -> PyResult<Vec<Vec<f32>>> {
        let v = self.inner.config().vocab_size;
        let t = self.inner.forward_soft_token(&tokens, lam).py()?;
        Ok(t.data().chunks_exact(v).map(<[f32]>::to_vec).collect())
    }

    #[pyo3(signature = (prompt, max_new, temperature = 1.0, seed = 0, eos = None))]
    fn generate(
        &self,
        prompt: Vec<usize>,
        max_new: usize,
        temperature: f32,
        seed: u64,
        eos: Option<usize>,
    ) -> PyResult<Vec<usize>> {
        let opts = GenerateOptions {
            max_new,
            temperature,
            eos,
        };
        self.inner
            .generate(&prompt, &opts, &mut tasks::sample_rng(seed, 0))
            .py()
    }

    /// Exact-match accuracy of sampled completions.
    #[pyo3(signature = (samples, temperature = 1.0, seed = 0))]
    fn accuracy(&self, samples: Vec<PySample>, temperature: f32, seed: u64) -> PyResult<f64> {
        let opts = EvalOptions { temperature, seed };
        evalkit::accuracy(&self.inner, &unwrap_samples(&samples), &Vocab::standard(), &opts).py()
    }

    /// Mean number of digit choices below `tau` at the answer position.
    #[pyo3(signature = (samples, tau = evalkit::DEFAULT_TAU))]
    fn eliminated_choices(&self, samples: Vec<PySample>, tau: f64) -> PyResult<f64> {
        evalkit::eliminated_choices(&self.inner, &unwrap_samples(&samples), &Vocab::standard(), tau).py()
    }

    /// Attach LoRA adapters of rank `rank` to the named projections.
    fn attach_lora(&mut self, rank: usize, targets: Vec<String>) -> PyResult<()> {
        let names: Vec<&str> = targets.iter().map(String::as_str).collect();
        self.inner.attach_lora_named(rank, &names).py().map(|_| ())
    }

    fn without_connections(&self) -> PyResult<Self> {
        Ok(PyModel {
            inner: self.inner.without_connections().py()?,
        })
    }

    fn trainable_params(&self) -> usize {
        self.inner.trainable_params()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.config().n_layers
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config().vocab_size
    }

    #[getter]
    fn connections(&self) -> Vec<(usize, usize)> {
        self.inner
            .spec()
            .connections()
            .iter()
            .map(|c| (c.source, c.dest))
            .collect()
    }

    #[getter]
    fn group_size(&self) -> usize {
        self.inner.spec().group_size
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(n_layers={}, d_hidden={}, n_heads={}, d_inter={}, connections={})",
            c.n_layers,
            c.d_hidden,
            c.n_heads,
            c.d_inter,
            self.inner.spec().len()
        )
    }
}

/// Training run settings, parsed from TOML; missing keys take defaults.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(PyTrainConfig {
            inner: TrainConfig::from_toml(toml).py()?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().py()
    }

    /// The baseline whose trainable-parameter count matches this config.
    fn matched_baseline(&self) -> PyResult<Self> {
        Ok(PyTrainConfig {
            inner: self.inner.matched_baseline().py()?,
        })
    }

    fn lr_at(&self, step: usize) -> f64 {
        trainer::lr_at(step, &self.inner)
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.method.to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }
}

#[pyclass(name = "Trainer")]
struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: PyTrainConfig) -> PyResult<Self> {
        Ok(PyTrainer {
            inner: Trainer::new(config.inner).py()?,
        })
    }

    #[staticmethod]
    fn resume(path: PathBuf) -> PyResult<Self> {
        Ok(PyTrainer {
            inner: Trainer::resume(path).py()?,
        })
    }

    /// One optimizer step on `samples`; returns the loss before the update.
    fn train_step(&mut self, samples: Vec<PySample>) -> PyResult<f32> {
        let owned = unwrap_samples(&samples);
        let refs: Vec<&Sample> = owned.iter().collect();
        self.inner.train_step(&refs).py()
    }

    /// Train for the configured epochs, writing checkpoints and metrics to `out`.
    #[pyo3(signature = (train, out, val = Vec::new(), stop_at = None))]
    fn run<'py>(
        &mut self,
        py: Python<'py>,
        train: Vec<PySample>,
        out: PathBuf,
        val: Vec<PySample>,
        stop_at: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let s = self
            .inner
            .run(&unwrap_samples(&train), &unwrap_samples(&val), &out, stop_at)
            .py()?;
        let d = PyDict::new(py);
        d.set_item("steps", s.steps)?;
        d.set_item("last_loss", s.last_loss)?;
        d.set_item("val_acc", s.val_acc)?;
        d.set_item("interrupted", s.interrupted)?;
        Ok(d)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).py()
    }

    #[getter]
    fn step(&self) -> usize {
        self.inner.step()
    }

    #[getter]
    fn model(&self) -> PyModel {
        PyModel {
            inner: self.inner.model().clone(),
        }
    }
}

fn task(name: &str) -> PyResult<tasks::Task> {
    name.parse().py()
}

/// Generate `n` samples of `task` ("parity" or "arith") with lengths in `[min_len, max_len]`.
#[pyfunction]
fn generate(name: &str, seed: u64, n: usize, min_len: usize, max_len: usize) -> PyResult<Vec<PySample>> {
    Ok(wrap_samples(
        tasks::generate(task(name)?, seed, n, min_len, max_len, &Vocab::standard()).py()?,
    ))
}

#[pyfunction]
fn read_jsonl(path: PathBuf) -> PyResult<Vec<PySample>> {
    Ok(wrap_samples(tasks::read_jsonl(path, &Vocab::standard()).py()?))
}

#[pyfunction]
fn write_jsonl(path: PathBuf, samples: Vec<PySample>) -> PyResult<()> {
    tasks::write_jsonl(path, &unwrap_samples(&samples)).py()
}

/// Trainable-parameter totals for a dims preset under LoRA rank `rank`.
#[pyfunction]
#[pyo3(signature = (dims, rank, n_conn = 0, rank_d = None))]
fn count_params<'py>(
    py: Python<'py>,
    dims: &str,
    rank: u64,
    n_conn: u64,
    rank_d: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let c = analysis::count_params(&analysis::dims_preset(dims).py()?, rank, n_conn, rank_d.unwrap_or(rank)).py()?;
    let d = PyDict::new(py);
    d.set_item("per_block", c.per_block)?;
    d.set_item("per_connection", c.per_connection)?;
    d.set_item("baseline_total", c.baseline_total)?;
    d.set_item("turboconn_total", c.turboconn_total)?;
    Ok(d)
}

/// Longest chain of layer-block applications over `k` tokens.
#[pyfunction]
#[pyo3(signature = (n_layers, k, connections = Vec::new(), g = 1))]
fn max_depth(n_layers: usize, k: usize, connections: Vec<(usize, usize)>, g: usize) -> PyResult<usize> {
    analysis::max_depth_raw(n_layers, k, &connections, g).py()
}

/// Digit classes whose renormalized probability is below `tau`.
#[pyfunction]
#[pyo3(signature = (digit_probs, tau = evalkit::DEFAULT_TAU))]
fn eliminated(digit_probs: [f64; 10], tau: f64) -> usize {
    evalkit::eliminated_in(&digit_probs, tau)
}

#[pymodule]
#[pyo3(name = "turboconn")]
fn turboconn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PyVocab>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(read_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(write_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(max_depth, m)?)?;
    m.add_function(wrap_pyfunction!(eliminated, m)?)?;
    Ok(())
}
