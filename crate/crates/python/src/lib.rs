//! Python bindings: configs, model construction, training, gradient checks
//! and attention rollout.

use std::collections::BTreeMap;
use std::path::PathBuf;

use dgsa::cli::{self, Overrides, RunConfig};
use dgsa::data::{Dataset, Inputs};
use dgsa::model::{build_model, Model};
use dgsa::rng::seeded;
use dgsa::{Error, Tensor};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyIOError::new_err(e.to_string()),
        3 => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// A resolved run configuration.
#[pyclass(name = "Config", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Loads `path` (or the defaults when `None`) and applies `overrides`.
    #[new]
    #[pyo3(signature = (path=None, overrides=None))]
    fn new(path: Option<PathBuf>, overrides: Option<BTreeMap<String, String>>) -> PyResult<Self> {
        let o = Overrides {
            sets: overrides.unwrap_or_default().into_iter().collect(),
            ..Default::default()
        };
        let inner = cli::load_config(path.as_deref(), &o).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn get(&self, key: &str) -> Option<String> {
        self.inner.get(key).map(str::to_string)
    }

    /// Copy with one key replaced.
    fn with_value(&self, key: &str, value: &str) -> PyResult<Self> {
        let inner = self.inner.with(key, value).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn canonical(&self) -> String {
        self.inner.canonical()
    }

    fn __repr__(&self) -> String {
        format!("Config(variant={}, task={})", self.inner.model.variant.name(), self.inner.model.task_name())
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

impl PyModel {
    fn batch(&self, tokens: Vec<Vec<usize>>) -> PyResult<Dataset> {
        let dgsa::model::Task::Text { max_seq_len: seq_len, .. } = self.inner.config().task else {
            return Err(PyValueError::new_err("token input needs a text model"));
        };
        if tokens.iter().any(|r| r.len() != seq_len) {
            return Err(PyValueError::new_err(format!("every row must hold {seq_len} token ids")));
        }
        let n = tokens.len();
        let ids = tokens.into_iter().flatten().collect();
        Dataset::new(Inputs::Tokens { ids, seq_len }, vec![0; n], self.inner.config().n_classes).map_err(py_err)
    }
}

#[pymethods]
impl PyModel {
    /// Fresh model for `config`, initialized from `seed`.
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &PyConfig, seed: u64) -> PyResult<Self> {
        let inner = build_model(&config.inner.model, &mut seeded(seed, "init", 0)).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn param_count(&self) -> usize {
        self.inner.count_params().total
    }

    /// Eval-mode logits for a batch of token rows.
    fn logits(&self, tokens: Vec<Vec<usize>>) -> PyResult<Vec<Vec<f64>>> {
        let b = self.batch(tokens)?;
        Ok(to_rows(&self.inner.logits(&b).map_err(py_err)?))
    }

    /// Signed head-averaged map per layer and their rollout for one token row.
    fn rollout(&self, tokens: Vec<usize>) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>)> {
        let b = self.batch(vec![tokens])?;
        let maps = self.inner.attention_maps(&b).map_err(py_err)?;
        let fused: Vec<Tensor> = maps[0].iter().map(|m| m.fused.clone()).collect();
        let labels = (0..fused[0].shape()[1]).map(|i| i.to_string()).collect();
        let r = dgsa::rollout::RolloutMap::from_fused(&fused, labels).map_err(py_err)?;
        Ok((r.layers.iter().map(to_rows).collect(), to_rows(&r.rollout)))
    }
}

/// Trains on the configured data; returns the model and a metrics dict.
#[pyfunction]
fn train(config: &PyConfig) -> PyResult<(PyModel, BTreeMap<String, f64>)> {
    let data = cli::load_data(&config.inner, None).map_err(py_err)?;
    let (model, out) = cli::train_and_evaluate(&data, None).map_err(py_err)?;
    let mut m = BTreeMap::from([
        ("train_accuracy".to_string(), out.train.accuracy),
        ("train_loss".to_string(), out.train.mean_loss),
        ("test_accuracy".to_string(), out.test.accuracy),
        ("test_loss".to_string(), out.test.mean_loss),
    ]);
    if let Some(o) = out.oracle {
        m.insert("oracle_accuracy".into(), o);
    }
    Ok((PyModel { inner: model }, m))
}

/// Finite-difference check; maps each parameter group to its max relative error.
#[pyfunction]
fn gradcheck(config: &PyConfig) -> PyResult<BTreeMap<String, f64>> {
    let out = cli::cmd_gradcheck(&config.inner, None, &mut std::io::sink()).map_err(py_err)?;
    Ok(out.groups.into_iter().map(|(g, e)| (g.name().to_string(), e)).collect())
}

#[pyfunction]
fn lambda_init_schedule(layer: usize) -> PyResult<f64> {
    dgsa::attention::lambda_init_schedule(layer).map_err(py_err)
}

/// Rollout of signed `N×N` layer maps.
#[pyfunction]
fn rollout(layers: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
    let maps = layers
        .iter()
        .map(|m| Tensor::from_rows(m))
        .collect::<dgsa::Result<Vec<_>>>()
        .map_err(py_err)?;
    Ok(to_rows(&dgsa::rollout::rollout_accumulate(&maps).map_err(py_err)?))
}

#[pymodule]
fn dgsa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_init_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    Ok(())
}
