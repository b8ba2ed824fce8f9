//! Python bindings: configs, models, routing, sparsity metrics and training.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mohd::config::RunConfig;
use mohd::layers::count_params as count;
use mohd::model::Model;
use mohd::router::{self, GateSpec};
use mohd::sparsity;
use mohd::training::{self, Checkpoint, Corpus, Trainer};
use mohd::{MohdError, Tensor};

fn py_err(e: MohdError) -> PyErr {
    match e {
        MohdError::Config(_) | MohdError::Shape { .. } | MohdError::OutOfRange { .. } | MohdError::Empty(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::matrix(&rows).map_err(py_err)
}

/// Validated run configuration (TOML sections model/router/train/analysis).
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = "", overrides = Vec::new()))]
    fn new(toml: &str, overrides: Vec<String>) -> PyResult<Self> {
        let inner = RunConfig::parse_with_overrides(toml, &overrides).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.render()
    }

    /// Returns a copy with `section.key=value` applied.
    fn with_set(&self, assignment: &str) -> PyResult<Self> {
        let inner = RunConfig::parse_with_overrides(&self.inner.render(), &[assignment.to_string()]).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.inner.mohd().hidden()
    }

    fn __repr__(&self) -> String {
        format!("Config(hidden={}, mohd={})", self.inner.mohd().hidden(), self.inner.model.mohd)
    }
}

/// Parameter totals for a config, as a dict.
#[pyfunction]
fn count_params<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyDict>> {
    let c = count(&config.inner.mohd()).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("total", c.total())?;
    d.set_item("activated", c.activated())?;
    d.set_item("matrix", c.matrix())?;
    d.set_item("matrix_active", c.matrix_active())?;
    d.set_item("router", c.router)?;
    d.set_item("fusion", c.fusion)?;
    d.set_item("norm", c.norm)?;
    d.set_item("embedding", c.embedding)?;
    d.set_item("head", c.head)?;
    Ok(d)
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = None))]
    fn new(config: &PyConfig, seed: Option<u64>) -> PyResult<Self> {
        let seed = seed.unwrap_or(config.inner.train.seed);
        Ok(Self {
            inner: Model::new(&config.inner.mohd(), seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path.as_ref()).map_err(py_err)?;
        Ok(Self {
            inner: ck.model().map_err(py_err)?,
        })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.store.numel()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.store.ids().map(|id| self.inner.store.name(id).to_string()).collect()
    }

    /// Logits `[len(ids)][vocab]` for token ids grouped into sequences of `seq_len`.
    fn logits(&self, py: Python<'_>, ids: Vec<usize>, seq_len: usize) -> PyResult<Vec<Vec<f64>>> {
        let t = py.detach(|| self.inner.logits(&ids, seq_len)).map_err(py_err)?;
        Ok(t.data().chunks(self.inner.vocab()).map(<[f64]>::to_vec).collect())
    }

    /// `(layer, site, percent)` activation flow with the block input at 100.
    fn activation_flow(&self, ids: Vec<usize>, seq_len: usize) -> PyResult<Vec<(usize, String, f64)>> {
        let flow = self.inner.activation_flow_trace(&ids, seq_len).map_err(py_err)?;
        Ok(flow.into_iter().map(|p| (p.layer, p.site.name().to_string(), p.percent)).collect())
    }
}

/// Mixed shared/specialised selection: returns `(selected, weights, scale)`.
#[pyfunction]
fn select_mixed(scores: Vec<f64>, delta: f64, phi_shared: f64) -> PyResult<(Vec<usize>, Vec<f64>, f64)> {
    let gate = GateSpec::new(scores.len(), delta, phi_shared).map_err(py_err)?;
    let d = router::select_mixed(&Tensor::vector(scores).map_err(py_err)?, &gate).map_err(py_err)?;
    Ok((d.selected, d.weights, d.scale))
}

/// Load-balance loss of a batch of router score rows.
#[pyfunction]
fn balance_loss(scores: Vec<Vec<f64>>, beta: f64) -> PyResult<f64> {
    let n = scores.first().map_or(0, Vec::len);
    let gate = GateSpec::new(n.max(1), 1.0, 0.0).map_err(py_err)?;
    let decisions = scores
        .into_iter()
        .map(|row| router::select_mixed(&Tensor::vector(row)?, &gate))
        .collect::<mohd::Result<Vec<_>>>()
        .map_err(py_err)?;
    router::balance_loss(&decisions, beta).map_err(py_err)
}

#[pyfunction]
fn magnitude(x: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(sparsity::magnitude(&Tensor::vector(x).map_err(py_err)?).into_data())
}

#[pyfunction]
#[pyo3(name = "sparsity", signature = (x, eps = 1e-4))]
fn hidden_sparsity(x: Vec<f64>, eps: f64) -> PyResult<f64> {
    sparsity::sparsity(&Tensor::vector(x).map_err(py_err)?, eps).map_err(py_err)
}

#[pyfunction]
fn cumulative_magnitude_curve(x: Vec<f64>) -> PyResult<Vec<f64>> {
    sparsity::cumulative_magnitude_curve(&x).map_err(py_err)
}

#[pyfunction]
fn shared_activation_count(rows: Vec<Vec<f64>>, q: f64) -> PyResult<usize> {
    sparsity::shared_activation_count(&rows_tensor(rows)?, q).map_err(py_err)
}

/// Trains on an in-memory text; returns `(step, ce, balance, eval_ppl or None)` rows.
#[pyfunction]
fn train_on_text(
    py: Python<'_>,
    config: &PyConfig,
    text: Vec<u8>,
) -> PyResult<Vec<(usize, f64, f64, Option<f64>)>> {
    let cfg = config.inner.clone();
    let log = py
        .detach(|| {
            let corpus = Corpus::from_bytes(text, cfg.train.holdout_frac, cfg.train.seq_len)?;
            Trainer::new(cfg, &corpus)?.run(None::<std::io::Sink>)
        })
        .map_err(py_err)?;
    Ok(log.into_iter().map(|m| (m.step, m.ce, m.balance, m.eval_ppl)).collect())
}

/// Trains from the config's corpus path, writing metrics and checkpoints as configured.
#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig) -> PyResult<Vec<(usize, f64, f64, Option<f64>)>> {
    let cfg = config.inner.clone();
    let log = py.detach(|| training::train(&cfg)).map_err(py_err)?;
    Ok(log.into_iter().map(|m| (m.step, m.ce, m.balance, m.eval_ppl)).collect())
}

#[pymodule]
fn mohd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(select_mixed, m)?)?;
    m.add_function(wrap_pyfunction!(balance_loss, m)?)?;
    m.add_function(wrap_pyfunction!(magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(hidden_sparsity, m)?)?;
    m.add_function(wrap_pyfunction!(cumulative_magnitude_curve, m)?)?;
    m.add_function(wrap_pyfunction!(shared_activation_count, m)?)?;
    m.add_function(wrap_pyfunction!(train_on_text, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
