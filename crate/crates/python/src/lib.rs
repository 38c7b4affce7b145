//! Python bindings for the `probact` crate.
//!
//! Tensors cross the boundary as `(shape, flat list)` pairs or the small
//! `Tensor` class; run configurations and metrics cross as JSON strings.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use probact::experiment::{self, RunConfig};
use probact::nn::{self, Activation, EvalMode, Phase, ProbActConfig, SigmaMode};
use probact::optim::{self, Checkpoint};
use probact::tensor::{self as pt, NoiseKey};

fn py_err(e: probact::Error) -> PyErr {
    match e {
        probact::Error::Io(_) | probact::Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Dense float64 array.
#[pyclass(name = "Tensor", module = "probact_py")]
pub struct PyTensor {
    inner: pt::Tensor<f64>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: pt::Tensor::new(shape, data).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self {
            inner: pt::Tensor::zeros(&shape),
        }
    }

    /// Xavier-normal initialization from `seed`.
    #[staticmethod]
    fn xavier(shape: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: pt::Tensor::create(&shape, &pt::Init::Xavier(seed)).map_err(py_err)?,
        })
    }

    /// Standard normal samples for one noise key.
    #[staticmethod]
    #[pyo3(signature = (shape, seed, layer=0, step=0, draw=0))]
    fn normal(shape: Vec<usize>, seed: u64, layer: u32, step: u64, draw: u32) -> Self {
        Self {
            inner: pt::sample_standard_normal(&shape, NoiseKey::new(seed, layer, step, draw)),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __add__(&self, other: PyRef<'_, PyTensor>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.add(&other.inner).map_err(py_err)?,
        })
    }

    fn __mul__(&self, other: PyRef<'_, PyTensor>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.mul(&other.inner).map_err(py_err)?,
        })
    }

    fn matmul(&self, other: PyRef<'_, PyTensor>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.matmul(&other.inner).map_err(py_err)?,
        })
    }

    fn sum(&self) -> f64 {
        self.inner.sum_all()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn wrap(t: pt::Tensor<f64>) -> PyTensor {
    PyTensor { inner: t }
}

/// Stochastic activation configuration.
#[pyclass(name = "ProbAct", module = "probact_py")]
pub struct PyProbAct {
    config: ProbActConfig,
}

#[pymethods]
impl PyProbAct {
    /// `mode` is `fixed`, `single`, `unbound` or `bounded`.
    #[new]
    #[pyo3(signature = (mode, sigma=None, alpha=nn::probact::DEFAULT_ALPHA, beta=nn::probact::DEFAULT_BETA, eval_mode="stochastic"))]
    fn new(mode: &str, sigma: Option<f64>, alpha: f64, beta: f64, eval_mode: &str) -> PyResult<Self> {
        let act = Activation::parse(&format!("probact:{mode}"), sigma, alpha, beta).map_err(py_err)?;
        let eval: EvalMode = eval_mode.parse().map_err(py_err)?;
        let config = act.probact_config().expect("probact activation").with_eval(eval);
        Ok(Self { config })
    }

    #[getter]
    fn trainable(&self) -> bool {
        self.config.mode.is_trainable()
    }

    /// Returns `(y, eps)`. `param` is the raw sigma or k tensor (absent in fixed mode).
    #[pyo3(signature = (x, param=None, seed=0, layer=0, step=0, train=true))]
    fn forward(
        &self,
        x: PyRef<'_, PyTensor>,
        param: Option<PyRef<'_, PyTensor>>,
        seed: u64,
        layer: u32,
        step: u64,
        train: bool,
    ) -> PyResult<(PyTensor, PyTensor)> {
        let phase = if train { Phase::Train } else { Phase::Eval };
        let key = NoiseKey::new(seed, layer, step, 0);
        let (y, rec) = nn::probact_forward(&x.inner, &self.config, param.as_ref().map(|p| &p.inner), key, phase)
            .map_err(py_err)?;
        Ok((wrap(y), wrap(rec.eps)))
    }

    /// Returns `(grad_x, grad_param)` for a forward call that used `eps`.
    #[pyo3(signature = (upstream, x, eps, param=None))]
    fn backward(
        &self,
        upstream: PyRef<'_, PyTensor>,
        x: PyRef<'_, PyTensor>,
        eps: PyRef<'_, PyTensor>,
        param: Option<PyRef<'_, PyTensor>>,
    ) -> PyResult<(PyTensor, Option<PyTensor>)> {
        let rec = nn::NoiseRecord {
            eps: eps.inner.clone(),
            key: NoiseKey::new(0, 0, 0, 0),
            draws: 1,
        };
        let (gx, gp) = nn::probact_backward(
            &upstream.inner,
            &x.inner,
            &rec,
            &self.config,
            param.as_ref().map(|p| &p.inner),
        )
        .map_err(py_err)?;
        Ok((wrap(gx), gp.map(wrap)))
    }

    fn __repr__(&self) -> String {
        format!("ProbAct({:?}, eval={})", self.config.mode, self.config.eval)
    }
}

#[pyfunction]
fn relu(x: PyRef<'_, PyTensor>) -> PyTensor {
    wrap(nn::activation::relu(&x.inner))
}

#[pyfunction]
#[pyo3(signature = (k, alpha=nn::probact::DEFAULT_ALPHA, beta=nn::probact::DEFAULT_BETA))]
fn bounded_sigma(k: PyRef<'_, PyTensor>, alpha: f64, beta: f64) -> PyResult<PyTensor> {
    nn::bounded_sigma(&k.inner, alpha, beta).map(wrap).map_err(py_err)
}

#[pyfunction]
fn step_decay(epoch: usize) -> f64 {
    optim::step_decay(epoch)
}

#[pyfunction]
fn gamma(train_acc: f64, test_acc: f64) -> f64 {
    experiment::gamma(train_acc, test_acc)
}

/// Default run configuration as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_json().map_err(py_err)
}

/// Trains a JSON run configuration and returns the metrics as JSON.
#[pyfunction]
fn train(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = RunConfig::parse(config_json, true).map_err(py_err)?;
    let outcome = py.detach(|| experiment::run_training(&cfg)).map_err(py_err)?;
    serde_json::to_string(&outcome.metrics).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Header of a checkpoint file as JSON.
#[pyfunction]
fn checkpoint_info(path: PathBuf) -> PyResult<String> {
    let c = Checkpoint::load(&path).map_err(py_err)?;
    serde_json::to_string(&c.meta).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Test accuracy of a checkpoint on the dataset of `config_json` (or the
/// one stored in the checkpoint).
#[pyfunction]
#[pyo3(signature = (path, eval_mode="stochastic", seed=None, config_json=None))]
fn evaluate(
    py: Python<'_>,
    path: PathBuf,
    eval_mode: &str,
    seed: Option<u64>,
    config_json: Option<&str>,
) -> PyResult<f64> {
    let ckpt = Checkpoint::load(&path).map_err(py_err)?;
    let cfg: RunConfig = match config_json {
        Some(j) => RunConfig::parse(j, true).map_err(py_err)?,
        None => serde_json::from_value(ckpt.meta.run.clone()).map_err(|e| PyValueError::new_err(e.to_string()))?,
    };
    let eval: EvalMode = eval_mode.parse().map_err(py_err)?;
    let seed = seed.unwrap_or(ckpt.meta.noise_seed);
    py.detach(|| {
        let (_, test) = cfg.load_data()?;
        experiment::evaluate_checkpoint(&ckpt, &test, eval, seed, 1 << 20, cfg.eval_batch_size)
    })
    .map(|r| r.accuracy)
    .map_err(py_err)
}

/// Writes a copy of a checkpoint with every activation replaced by ReLU.
#[pyfunction]
fn swap_to_relu(src: PathBuf, dst: PathBuf) -> PyResult<()> {
    let ckpt = Checkpoint::load(&src).map_err(py_err)?;
    experiment::swap_activation(&ckpt, Activation::Relu)
        .and_then(|c| c.save(&dst))
        .map_err(py_err)
}

/// True when `mode` names a trainable sigma mode.
#[pyfunction]
fn is_trainable_mode(mode: &str) -> bool {
    matches!(
        Activation::parse(&format!("probact:{mode}"), Some(0.0), 2.0, 5.0)
            .ok()
            .and_then(|a| a.probact_config().map(|c| c.mode)),
        Some(SigmaMode::Single | SigmaMode::ElementwiseUnbound | SigmaMode::ElementwiseBounded { .. })
    )
}

#[pymodule]
pub fn probact_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyProbAct>()?;
    m.add_function(wrap_pyfunction!(relu, m)?)?;
    m.add_function(wrap_pyfunction!(bounded_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(step_decay, m)?)?;
    m.add_function(wrap_pyfunction!(gamma, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_info, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(swap_to_relu, m)?)?;
    m.add_function(wrap_pyfunction!(is_trainable_mode, m)?)?;
    Ok(())
}
