//! Python bindings: tensors, a few graph ops, the network, metrics, losses,
//! synthetic data, training and gradient checks.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use medlitenet::data::{normalize_imagenet, synth_sample as core_synth, Difficulty, SegmentationSample};
use medlitenet::gradsuite::{run_scope, Scope, SuiteOptions};
use medlitenet::losses::{total_loss_value, LossConfig};
use medlitenet::metrics::confusion_metrics;
use medlitenet::model::{Checkpoint, MedLiteNet, ModelConfig};
use medlitenet::train::{ensemble_weights as core_weights, fit, tta_predict_model, FitOptions, TrainConfig};
use medlitenet::{Conv2dSpec, Error, Graph};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) | Error::GradCheck(_) => {
            PyArithmeticError::new_err(e.to_string())
        }
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Dense float32 array with an NCHW-style shape.
#[pyclass(name = "Tensor", module = "medlitenet", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor(medlitenet::Tensor<f32>);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        medlitenet::Tensor::new(shape, data).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self(medlitenet::Tensor::zeros(shape))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    /// Row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        medlitenet::Tensor::new(shape, self.0.data().to_vec()).map(Self).map_err(py_err)
    }

    fn sum(&self) -> f64 {
        self.0.data().iter().map(|&v| f64::from(v)).sum()
    }

    fn __len__(&self) -> usize {
        self.0.data().len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// `conv2d(x, w, bias=None, stride=1, dilation=1, groups=1, padding=None)`;
/// padding defaults to "same" for stride 1.
#[pyfunction]
#[pyo3(signature = (x, w, bias=None, stride=1, dilation=1, groups=1, padding=None))]
fn conv2d(
    x: &PyTensor,
    w: &PyTensor,
    bias: Option<&PyTensor>,
    stride: usize,
    dilation: usize,
    groups: usize,
    padding: Option<usize>,
) -> PyResult<PyTensor> {
    let (xs, ws) = (x.0.shape(), w.0.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(PyValueError::new_err(format!("expected 4-D input and weight, got {xs:?} and {ws:?}")));
    }
    let mut spec = Conv2dSpec::new(xs[1], ws[0], ws[2]).stride(stride).dilation(dilation).groups(groups);
    if let Some(p) = padding {
        spec = spec.padding(p);
    }
    if bias.is_some() {
        spec = spec.with_bias();
    }
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.0.clone()), g.constant(w.0.clone()));
    let bv = bias.map(|b| g.constant(b.0.clone()));
    let y = g.conv2d(xv, wv, bv, spec).map_err(py_err)?;
    Ok(PyTensor(g.value(y).clone()))
}

#[pyfunction]
fn softmax(x: &PyTensor, axis: usize) -> PyResult<PyTensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.0.clone());
    let y = g.softmax(xv, axis).map_err(py_err)?;
    Ok(PyTensor(g.value(y).clone()))
}

fn difficulty(name: &str) -> PyResult<Difficulty> {
    Difficulty::ALL
        .into_iter()
        .find(|d| d.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown difficulty `{name}` (regular, irregular, low_contrast)")))
}

/// Deterministic synthetic sample: `(image [3,H,W] in [0,1], mask [1,H,W])`.
#[pyfunction]
#[pyo3(signature = (seed, size=64, difficulty="regular"))]
fn synth_sample(seed: u64, size: usize, difficulty: &str) -> PyResult<(PyTensor, PyTensor)> {
    let s = core_synth(seed, size, self::difficulty(difficulty)?).map_err(py_err)?;
    Ok((PyTensor(s.image), PyTensor(s.mask)))
}

#[pyfunction]
fn confusion(py: Python<'_>, pred: &PyTensor, gt: &PyTensor) -> PyResult<Py<PyDict>> {
    let r = confusion_metrics(pred.0.data(), gt.0.data()).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("dice", r.dice)?;
    d.set_item("iou", r.iou)?;
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("sensitivity", r.sensitivity)?;
    d.set_item("specificity", r.specificity)?;
    d.set_item("tp", r.tp)?;
    d.set_item("fp", r.fp)?;
    d.set_item("tn", r.tn)?;
    d.set_item("fn", r.fn_)?;
    Ok(d.unbind())
}

/// `alpha * BCE + beta * Dice loss` of probabilities against a binary mask.
#[pyfunction]
#[pyo3(signature = (prob, target, alpha=0.5, beta=0.5))]
fn total_loss(prob: &PyTensor, target: &PyTensor, alpha: f64, beta: f64) -> PyResult<f64> {
    let cfg = LossConfig {
        alpha,
        beta,
        ..LossConfig::default()
    };
    total_loss_value(&prob.0, &target.0, &cfg).map_err(py_err)
}

#[pyfunction]
fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64, lr_min: f64) -> f64 {
    medlitenet::train::cosine_lr(epoch, total_epochs, lr0, lr_min)
}

#[pyfunction]
fn ensemble_weights(val_dices: Vec<f64>) -> PyResult<Vec<f64>> {
    core_weights(&val_dices).map_err(py_err)
}

/// `[(name, max_rel_err, passed)]` for one gradient-check scope.
#[pyfunction]
#[pyo3(signature = (scope="ops", tol=None))]
fn gradcheck(scope: &str, tol: Option<f64>) -> PyResult<Vec<(String, f64, bool)>> {
    let scope: Scope = scope.parse().map_err(py_err)?;
    let mut opts = SuiteOptions::new(scope);
    if let Some(t) = tol {
        opts.tol = t;
    }
    let items = run_scope(scope, &opts).map_err(py_err)?;
    Ok(items.into_iter().map(|i| (i.name, i.max_rel_err, i.pass)).collect())
}

fn batch(images: &PyTensor) -> PyResult<medlitenet::Tensor<f32>> {
    let x = normalize_imagenet(&images.0).map_err(py_err)?;
    if x.shape().len() == 3 {
        let s = x.shape().to_vec();
        return medlitenet::Tensor::new(vec![1, s[0], s[1], s[2]], x.data().to_vec()).map_err(py_err);
    }
    Ok(x)
}

/// The segmentation network with float32 weights.
#[pyclass(name = "Model", module = "medlitenet")]
struct PyModel(MedLiteNet<f32>);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (preset="default", seed=0, width_multiplier=None))]
    fn new(preset: &str, seed: u64, width_multiplier: Option<f64>) -> PyResult<Self> {
        let mut cfg = ModelConfig::preset(preset).map_err(py_err)?;
        if let Some(w) = width_multiplier {
            cfg.width_multiplier = w;
        }
        MedLiteNet::build(&cfg, seed).map(Self).map_err(py_err)
    }

    /// Loads a checkpoint, preferring its EMA weights unless `ema=False`.
    #[staticmethod]
    #[pyo3(signature = (path, ema=true))]
    fn load(path: PathBuf, ema: bool) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        ckpt.to_model(None, ema).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.0).save(&path).map_err(py_err)
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.0.config.input_size
    }

    fn parameter_count(&self) -> usize {
        self.0.count_parameters().total
    }

    fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        self.0.count_parameters().modules
    }

    /// Eval-mode probabilities `[N,1,H,W]` for raw images in `[0,1]`,
    /// shaped `[3,H,W]` or `[N,3,H,W]`.
    fn predict(&self, py: Python<'_>, images: &PyTensor) -> PyResult<PyTensor> {
        let x = batch(images)?;
        py.detach(|| self.0.predict(&x)).map(PyTensor).map_err(py_err)
    }

    /// Six-transform test-time-augmented probabilities.
    fn predict_tta(&self, py: Python<'_>, images: &PyTensor) -> PyResult<PyTensor> {
        let x = batch(images)?;
        py.detach(|| tta_predict_model(&self.0, &self.0.store, &x)).map(PyTensor).map_err(py_err)
    }

    /// Trains on deterministic synthetic samples, keeps the best EMA
    /// weights and returns one dict per epoch.
    #[pyo3(signature = (n_train=8, n_val=2, epochs=5, batch_size=4, seed=0))]
    fn fit_synthetic(
        &mut self,
        py: Python<'_>,
        n_train: usize,
        n_val: usize,
        epochs: usize,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<Py<PyDict>>> {
        let size = self.0.config.input_size;
        let make = |range: std::ops::Range<usize>| -> PyResult<Vec<SegmentationSample>> {
            range
                .map(|i| core_synth(seed.wrapping_add(i as u64), size, Difficulty::ALL[i % 3]).map_err(py_err))
                .collect()
        };
        let (train, val) = (make(0..n_train)?, make(n_train..n_train + n_val)?);
        let cfg = TrainConfig {
            epochs,
            batch_size,
            seed,
            ..TrainConfig::default()
        };
        let model = self.0.clone();
        let out = py
            .detach(|| fit(model, &train, &val, &cfg, FitOptions::default()))
            .map_err(py_err)?;
        self.0 = out.best.to_model(None, true).map_err(py_err)?;
        out.history
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("lr", r.lr)?;
                d.set_item("train_loss", r.train.loss)?;
                d.set_item("train_dice", r.train.dice)?;
                d.set_item("val_loss", r.val.loss)?;
                d.set_item("val_dice", r.val.dice)?;
                d.set_item("val_iou", r.val.iou)?;
                Ok(d.unbind())
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_size={}, parameters={})",
            self.0.config.input_size,
            self.0.count_parameters().total
        )
    }
}

#[pymodule(name = "medlitenet")]
fn medlitenet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(synth_sample, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_weights, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
