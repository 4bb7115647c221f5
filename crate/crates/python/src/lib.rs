//! Python bindings. Tensors cross the boundary as a shape plus a flat,
//! row-major list of floats.

use kmod::data::{synth_task, DatasetSplit, SynthKind};
use kmod::delta::{self, memory_report};
use kmod::modulator::{self, InitMethod, InitSpec, KernelShape};
use kmod::net::{build_network, NetworkSpec, ParamGroupMask};
use kmod::tensor::{self, Activation};
use kmod::train::{self, LrSchedule, TrainConfig};
use kmod::KmError;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: KmError) -> PyErr {
    match e {
        KmError::Io { .. } => PyIOError::new_err(e.to_string()),
        KmError::Diverged(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Tensor", module = "kmod_py", from_py_object)]
#[derive(Clone)]
pub struct PyTensor(tensor::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        tensor::Tensor::new(shape, data).map(PyTensor).map_err(err)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor(tensor::Tensor::zeros(shape))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> f64 {
        self.0.max_abs_diff(&other.0)
    }

    fn __len__(&self) -> usize {
        self.0.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

#[pyfunction]
fn conv2d(x: &PyTensor, w: &PyTensor, stride: usize, padding: usize) -> PyResult<PyTensor> {
    tensor::conv2d(&x.0, &w.0, stride, padding).map(PyTensor).map_err(err)
}

#[pyfunction]
fn matmul(a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
    tensor::matmul(&a.0, &b.0).map(PyTensor).map_err(err)
}

#[pyfunction]
fn elementwise(kind: &str, x: &PyTensor) -> PyResult<PyTensor> {
    let act: Activation = kind.parse().map_err(err)?;
    Ok(PyTensor(tensor::elementwise(act, &x.0)))
}

#[pyclass(name = "KernelModulator", module = "kmod_py", from_py_object)]
#[derive(Clone)]
pub struct PyModulator(modulator::KernelModulator);

#[pymethods]
impl PyModulator {
    /// Modulator for kernels of shape `(k_n, k_c, k_h, k_w)`.
    #[new]
    #[pyo3(signature = (kernel_shape, depth=2, activation="tanh", init="identity_noise", sigma=0.001, seed=0))]
    fn new(
        kernel_shape: (usize, usize, usize, usize),
        depth: usize,
        activation: &str,
        init: &str,
        sigma: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let (n, c, h, w) = kernel_shape;
        let shape = KernelShape::new(n, c, h, w).map_err(err)?;
        let method = InitMethod::parse(init, sigma).map_err(err)?;
        let act: Activation = activation.parse().map_err(err)?;
        modulator::init_modulator(shape, depth, act, &InitSpec::new(method, seed))
            .map(PyModulator)
            .map_err(err)
    }

    #[getter]
    fn depth(&self) -> usize {
        self.0.depth()
    }

    #[getter]
    fn trainable_count(&self) -> usize {
        self.0.trainable_count()
    }

    fn modulate(&self, w: &PyTensor) -> PyResult<PyTensor> {
        modulator::modulate(&w.0, &self.0).map(PyTensor).map_err(err)
    }
}

#[pyclass(name = "Dataset", module = "kmod_py", from_py_object)]
#[derive(Clone)]
pub struct PyDataset(DatasetSplit);

#[pymethods]
impl PyDataset {
    #[getter]
    fn images(&self) -> PyTensor {
        PyTensor(self.0.images.clone())
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.labels.clone()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.0.class_count
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Synthetic `(train, test)` splits; `kind` is `separable_blobs` or
/// `striped_textures`.
#[pyfunction]
#[pyo3(signature = (kind, classes, n_per_class, image_size, seed=0))]
fn synthetic_task(
    kind: &str,
    classes: usize,
    n_per_class: usize,
    image_size: usize,
    seed: u64,
) -> PyResult<(PyDataset, PyDataset)> {
    let kind: SynthKind = kind.parse().map_err(err)?;
    let (tr, te) = synth_task(kind, classes, n_per_class, image_size, seed).map_err(err)?;
    Ok((PyDataset(tr), PyDataset(te)))
}

#[pyclass(name = "Network", module = "kmod_py")]
pub struct PyNetwork(kmod::net::Network);

#[pymethods]
impl PyNetwork {
    /// A resnet_micro network. `mask` is a comma list of parameter groups
    /// (convolution, implicit, explicit, classifier) or `all`.
    #[new]
    #[pyo3(signature = (input_shape, classes, mask="implicit,explicit,classifier", n_blocks=1, base_width=8, seed=0))]
    fn new(
        input_shape: (usize, usize, usize),
        classes: usize,
        mask: &str,
        n_blocks: usize,
        base_width: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let mask: ParamGroupMask = mask.parse().map_err(err)?;
        let (c, h, w) = input_shape;
        let spec = NetworkSpec::resnet_micro(n_blocks, base_width, [c, h, w], classes);
        build_network(spec, mask, seed).map(PyNetwork).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        delta::load_checkpoint(path).map(PyNetwork).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        delta::save_checkpoint(&self.0, path).map_err(err)
    }

    #[getter]
    fn mask(&self) -> String {
        self.0.mask().to_string()
    }

    /// `(trainable, total)` parameter counts.
    fn count_params(&self) -> (usize, usize) {
        let c = self.0.count_params();
        (c.trainable, c.total)
    }

    fn fingerprint(&self) -> String {
        delta::fingerprint_hex(&delta::fingerprint(&self.0))
    }

    /// Eval-mode logits for a `[B, C, H, W]` batch.
    fn predict(&self, x: &PyTensor) -> PyResult<PyTensor> {
        self.0.predict(&x.0).map(PyTensor).map_err(err)
    }

    fn evaluate(&self, data: &PyDataset) -> PyResult<(f64, f64)> {
        train::evaluate(&self.0, &data.0).map_err(err)
    }

    /// SGD training; returns the run summary as a dict.
    #[pyo3(signature = (train_data, test_data=None, epochs=20, batch_size=64, lr=0.05, lr_schedule="step:12/16:0.1", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        train_data: &PyDataset,
        test_data: Option<&PyDataset>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        lr_schedule: &str,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let lr_schedule: LrSchedule = lr_schedule.parse().map_err(err)?;
        let cfg = TrainConfig {
            epochs,
            batch_size,
            learning_rate: lr,
            lr_schedule,
            seed,
            ..TrainConfig::default()
        };
        let r = train::train(&mut self.0, &train_data.0, test_data.map(|d| &d.0), &cfg, &mut |_| {}).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("final_test_accuracy", r.final_test_accuracy)?;
        out.set_item("final_train_accuracy", r.final_train_accuracy)?;
        out.set_item("accuracy_curve", r.accuracy_curve)?;
        out.set_item("loss_curve", r.loss_curve)?;
        out.set_item("trainable_params", r.trainable_params)?;
        out.set_item("total_params", r.total_params)?;
        Ok(out)
    }

    /// Write this network's task delta; returns its size in bytes.
    fn export_delta(&self, task: &str, path: &str) -> PyResult<usize> {
        let d = delta::export_delta(&self.0, task).map_err(err)?;
        d.write(path).map_err(err)?;
        Ok(d.byte_len())
    }

    /// A copy of this (base) network with the delta at `path` applied.
    fn apply_delta(&self, path: &str) -> PyResult<PyNetwork> {
        let d = delta::KmDelta::read(path).map_err(err)?;
        delta::apply_delta(&self.0, &d).map(PyNetwork).map_err(err)
    }

    fn copy(&self) -> PyNetwork {
        PyNetwork(self.0.clone())
    }
}

#[pyfunction]
fn recovered_accuracy_ratio(method_acc: f64, full_acc: f64) -> PyResult<f64> {
    train::recovered_accuracy_ratio(method_acc, full_acc).map_err(err)
}

/// Storage totals in bytes for one base plus `tasks` deltas.
#[pyfunction]
fn storage_report<'py>(py: Python<'py>, base_bytes: u64, per_task_bytes: u64, tasks: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = memory_report(base_bytes, per_task_bytes, tasks).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("naive_total_bytes", r.naive_total_bytes)?;
    out.set_item("km_total_bytes", r.km_total_bytes)?;
    out.set_item("reduction_factor", r.reduction_factor)?;
    out.set_item("per_task_factor", r.per_task_factor)?;
    Ok(out)
}

#[pymodule]
fn kmod_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModulator>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(matmul, m)?)?;
    m.add_function(wrap_pyfunction!(elementwise, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_task, m)?)?;
    m.add_function(wrap_pyfunction!(recovered_accuracy_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(storage_report, m)?)?;
    Ok(())
}
