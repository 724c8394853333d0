//! Python bindings: configuration, model, datasets, training and the
//! numeric building blocks. Tensors cross the boundary as nested lists.

use std::path::PathBuf;

use hstmixer::data::{self, Role, SplitConfig, SynthConfig, TrafficDataset};
use hstmixer::embedding::StepTime;
use hstmixer::model::{self, HstMixer};
use hstmixer::tensor::{load_checkpoint, save_checkpoint, Tape, Tensor};
use hstmixer::trainer::{self, AdamConfig, Metrics, TrainConfig};
use hstmixer::{Ablation, ErrorKind};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: hstmixer::Error) -> PyErr {
    match (&e, e.kind()) {
        (hstmixer::Error::Io { .. }, _) => PyOSError::new_err(e.to_string()),
        (_, ErrorKind::Numeric) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor3(x: Vec<Vec<Vec<f64>>>) -> PyResult<Tensor<f32>> {
    let (b, n) = (x.len(), x.first().map_or(0, Vec::len));
    let t = x.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(b * n * t);
    for plane in &x {
        if plane.len() != n || plane.iter().any(|r| r.len() != t) {
            return Err(PyValueError::new_err("ragged nested list"));
        }
        flat.extend(plane.iter().flatten().map(|&v| v as f32));
    }
    Tensor::new(&[b, n, t], flat).map_err(to_py)
}

fn nested3(t: &Tensor<f32>) -> Vec<Vec<Vec<f64>>> {
    let (n, k) = (t.shape()[1], t.shape()[2]);
    t.data()
        .chunks(n * k)
        .map(|plane| plane.chunks(k).map(|r| r.iter().map(|&v| v as f64).collect()).collect())
        .collect()
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mae", m.mae)?;
    d.set_item("rmse", m.rmse)?;
    d.set_item("mape", m.mape)?;
    d.set_item("horizon_mae", m.horizons.iter().map(|h| h.mae).collect::<Vec<_>>())?;
    Ok(d)
}

#[pyclass(name = "ModelConfig", module = "hstmixer_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModelConfig {
    inner: hstmixer::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (nodes, regions, pool_sizes, d=64, h=128, p=2, blocks=4, input_steps=12, output_steps=12, alpha=1.0, beta=0.1, interval_minutes=15, ablations=Vec::new()))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        nodes: usize,
        regions: Vec<usize>,
        pool_sizes: Vec<usize>,
        d: usize,
        h: usize,
        p: usize,
        blocks: usize,
        input_steps: usize,
        output_steps: usize,
        alpha: f64,
        beta: f64,
        interval_minutes: usize,
        ablations: Vec<String>,
    ) -> PyResult<Self> {
        let mut ablation = Ablation::default();
        for a in &ablations {
            match a.as_str() {
                "no_am" => ablation.no_am = true,
                "no_th" => ablation.no_th = true,
                "no_sh" => ablation.no_sh = true,
                "no_tp" => ablation.no_tp = true,
                "no_sp" => ablation.no_sp = true,
                other => return Err(PyValueError::new_err(format!("unknown ablation {other:?}"))),
            }
        }
        let inner = hstmixer::ModelConfig {
            d,
            h,
            p,
            blocks,
            input_steps,
            output_steps,
            alpha,
            beta,
            interval_minutes,
            ablation,
            ..hstmixer::ModelConfig::new(nodes, regions, pool_sizes)
        };
        inner.validate().map_err(to_py)?;
        Ok(PyModelConfig { inner })
    }

    /// The small preset used for gradient checks.
    #[staticmethod]
    fn tiny() -> Self {
        PyModelConfig {
            inner: hstmixer::ModelConfig::tiny(),
        }
    }

    #[getter]
    fn nodes(&self) -> usize {
        self.inner.nodes
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn input_steps(&self) -> usize {
        self.inner.input_steps
    }

    #[getter]
    fn output_steps(&self) -> usize {
        self.inner.output_steps
    }

    fn temporal_lengths(&self) -> Vec<usize> {
        self.inner.temporal_lengths()
    }

    fn parameter_count(&self) -> usize {
        model::parameter_count(&self.inner)
    }

    fn flop_estimate(&self) -> u64 {
        model::flop_estimate(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "Dataset", module = "hstmixer_py")]
pub struct PyDataset {
    inner: TrafficDataset,
    regions: Option<Vec<usize>>,
}

#[pymethods]
impl PyDataset {
    /// Synthetic regional traffic; `sigma` is the AR(1) innovation scale.
    #[staticmethod]
    #[pyo3(signature = (nodes, steps, regions, seed=0, sigma=0.1))]
    fn synth(nodes: usize, steps: usize, regions: usize, seed: u64, sigma: f64) -> PyResult<Self> {
        let mut cfg = SynthConfig::new(nodes, steps, regions, seed);
        cfg.sigma = sigma;
        let s = data::synth(&cfg).map_err(to_py)?;
        Ok(PyDataset {
            inner: s.dataset,
            regions: Some(s.regions),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, aggregate=1))]
    fn load(path: PathBuf, aggregate: usize) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::ingest(&path, aggregate).map_err(to_py)?,
            regions: None,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(to_py)
    }

    #[getter]
    fn nodes(&self) -> usize {
        self.inner.nodes()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn interval_minutes(&self) -> usize {
        self.inner.interval_minutes
    }

    #[getter]
    fn start_epoch(&self) -> i64 {
        self.inner.start_epoch
    }

    /// Region of every node, for synthetic data.
    #[getter]
    fn regions(&self) -> Option<Vec<usize>> {
        self.regions.clone()
    }

    /// `[nodes][steps]` values.
    fn values(&self) -> Vec<Vec<f64>> {
        let t = self.inner.steps();
        self.inner
            .series
            .data()
            .chunks(t.max(1))
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect()
    }
}

#[pyclass(name = "Model", module = "hstmixer_py")]
pub struct PyModel {
    inner: HstMixer<f32>,
}

#[pymethods]
impl PyModel {
    /// `static_table` is `[nodes][d]`; a seeded random table is used when
    /// omitted.
    #[new]
    #[pyo3(signature = (config, static_table=None, seed=0))]
    fn new(config: &PyModelConfig, static_table: Option<Vec<Vec<f64>>>, seed: u64) -> PyResult<Self> {
        let cfg = &config.inner;
        let table = match static_table {
            Some(rows) => {
                if rows.len() != cfg.nodes || rows.iter().any(|r| r.len() != cfg.d) {
                    return Err(PyValueError::new_err(format!(
                        "static table must be {} rows of {} values",
                        cfg.nodes, cfg.d
                    )));
                }
                Tensor::new(&[cfg.nodes, cfg.d], rows.concat()).map_err(to_py)?
            }
            None => model::random_static_table(cfg.nodes, cfg.d, seed),
        };
        Ok(PyModel {
            inner: HstMixer::new(cfg, &table, seed).map_err(to_py)?,
        })
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config().clone(),
        }
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|(_, n, _)| n.to_string()).collect()
    }

    fn learnable_count(&self) -> usize {
        self.inner.params.learnable_count()
    }

    fn set_normalization(&mut self, mean: Vec<f64>, std: Vec<f64>) -> PyResult<()> {
        self.inner.set_normalization(&mean, &std).map_err(to_py)
    }

    /// Forecast in data units. `x` is normalised `[B][N][T]`; `start_epochs`
    /// gives the unix time of each sample's first input step.
    fn predict(&self, x: Vec<Vec<Vec<f64>>>, start_epochs: Vec<i64>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let x = tensor3(x)?;
        let cfg = self.inner.config();
        if start_epochs.len() != x.shape()[0] {
            return Err(PyValueError::new_err("one start time per sample is required"));
        }
        let step = cfg.interval_minutes as i64 * 60;
        let times: Vec<StepTime> = start_epochs
            .iter()
            .flat_map(|&s| (0..cfg.input_steps as i64).map(move |k| StepTime::from_epoch(s + k * step, cfg.interval_minutes)))
            .collect();
        Ok(nested3(&self.inner.predict(&x, &times).map_err(to_py)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner.params, &path).map_err(to_py)
    }

    fn load(&mut self, path: PathBuf) -> PyResult<()> {
        load_checkpoint(&mut self.inner.params, &path).map_err(to_py)
    }
}

/// Trains `model` in place on the chronological 6:2:2 split of `dataset`.
#[pyfunction]
#[pyo3(signature = (model, dataset, epochs=30, patience=5, batch_size=64, lr=1e-3, stride=1, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    model: &mut PyModel,
    dataset: &PyDataset,
    epochs: usize,
    patience: usize,
    batch_size: usize,
    lr: f64,
    stride: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let splits = data::split_and_normalize(&dataset.inner, &SplitConfig::default()).map_err(to_py)?;
    let cfg = TrainConfig {
        epochs,
        patience,
        batch_size,
        stride,
        seed,
        adam: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let report = trainer::train(&mut model.inner, &splits, &cfg).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("best_epoch", report.best_epoch)?;
    d.set_item("best_val_mae", report.best_val_mae)?;
    d.set_item("steps", report.steps)?;
    d.set_item("train_loss", report.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>())?;
    d.set_item("val_mae", report.epochs.iter().map(|e| e.val.mae).collect::<Vec<_>>())?;
    Ok(d)
}

/// Metrics of `model` on one split ("train", "val" or "test").
#[pyfunction]
#[pyo3(signature = (model, dataset, split="test"))]
fn evaluate<'py>(py: Python<'py>, model: &PyModel, dataset: &PyDataset, split: &str) -> PyResult<Bound<'py, PyDict>> {
    let role = match split {
        "train" => Role::Train,
        "val" => Role::Val,
        "test" => Role::Test,
        other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
    };
    let splits = data::split_and_normalize(&dataset.inner, &SplitConfig::default()).map_err(to_py)?;
    let m = trainer::evaluate(&model.inner, &splits, role, 64).map_err(to_py)?;
    metrics_dict(py, &m)
}

/// MAE, RMSE and MAPE of `[B][N][T]` forecasts.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, pred: Vec<Vec<Vec<f64>>>, target: Vec<Vec<Vec<f64>>>) -> PyResult<Bound<'py, PyDict>> {
    let m = trainer::metrics(&tensor3(pred)?, &tensor3(target)?).map_err(to_py)?;
    metrics_dict(py, &m)
}

/// Orthogonality penalty of two `[B][S][T*h]` weight stacks.
#[pyfunction]
fn orthogonality_penalty(w1: Vec<Vec<Vec<f64>>>, w2: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
    let (a, b) = (tensor3(w1)?, tensor3(w2)?);
    let shape = a.shape().to_vec();
    let lift = |t: Tensor<f32>| t.cast::<f64>().reshape(&[shape[0], shape[1], 1, shape[2]]);
    let (a, b) = (lift(a).map_err(to_py)?, lift(b).map_err(to_py)?);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
    let p = hstmixer::stblock::pol(&mut tape, va, vb).map_err(to_py)?;
    Ok(tape.item(p))
}

/// Full-model finite-difference check at the tiny preset; returns the
/// largest relative error.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<f64> {
    let report = py
        .detach(|| model::model_gradcheck(&hstmixer::ModelConfig::tiny(), 2, seed))
        .map_err(to_py)?;
    Ok(report.max_rel_error())
}

#[pymodule]
fn hstmixer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(orthogonality_penalty, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
