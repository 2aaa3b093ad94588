//! Python bindings for the core types and ops.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyList;

use tdm_core::checkpoint::Checkpoint;
use tdm_core::detect::{iou as box_iou, nms as box_nms, BBox, DetectionRecord};
use tdm_core::inspect::inspect;
use tdm_core::metrics::{evaluate as eval_metrics, EvalSpec};
use tdm_core::model::Detector as CoreDetector;
use tdm_core::ops::{ConvGeometry, PoolRounding};
use tdm_core::synthdata::{gen_scene, AnnotationRecord, SceneSpec};
use tdm_core::{ArchConfig, Graph, TdmError};

fn py_err(e: TdmError) -> PyErr {
    match e {
        TdmError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py_json(py: Python<'_>, v: &impl serde::Serialize) -> PyResult<PyObject> {
    let s = serde_json::to_string(v).map_err(json_err)?;
    Ok(py.import_bound("json")?.call_method1("loads", (s,))?.unbind())
}

fn from_py_json<T: for<'de> serde::Deserialize<'de>>(py: Python<'_>, v: &Bound<'_, PyAny>) -> PyResult<T> {
    let s: String = py.import_bound("json")?.call_method1("dumps", (v,))?.extract()?;
    serde_json::from_str(&s).map_err(json_err)
}

/// Dense row-major tensor of reals; feature maps are `[H, W, C]`.
#[pyclass(name = "Tensor")]
#[derive(Clone)]
struct PyTensor {
    inner: tdm_core::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        let data = data.into_iter().map(|v| v as tdm_core::Real).collect();
        Ok(PyTensor {
            inner: tdm_core::Tensor::new(shape, data).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor {
            inner: tdm_core::Tensor::zeros(&shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().iter().map(|&v| v as f64).collect()
    }

    fn sum(&self) -> f64 {
        self.inner.sum() as f64
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Architecture config: backbone, TDM pairs and detector settings.
#[pyclass(name = "Arch")]
#[derive(Clone)]
struct PyArch {
    inner: ArchConfig,
}

#[pymethods]
impl PyArch {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyArch {
            inner: ArchConfig::load(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn num_pairs(&self) -> usize {
        self.inner.tdm.pairs.len()
    }

    /// The `tdm inspect` text table.
    fn table(&self) -> PyResult<String> {
        Ok(inspect(&self.inner).map_err(py_err)?.to_table())
    }

    /// Shapes, wiring and parameter counts as a dict.
    fn inspect(&self, py: Python<'_>) -> PyResult<PyObject> {
        to_py_json(py, &inspect(&self.inner).map_err(py_err)?)
    }
}

#[pyclass(name = "Detector")]
#[derive(Clone)]
struct PyDetector {
    inner: CoreDetector,
}

#[pymethods]
impl PyDetector {
    #[staticmethod]
    #[pyo3(signature = (arch, seed = 0))]
    fn baseline(arch: &PyArch, seed: u64) -> PyResult<Self> {
        Ok(PyDetector {
            inner: CoreDetector::baseline(&arch.inner, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(PyDetector {
            inner: ck.into_detector().map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_detector(&self.inner).save(&path).map_err(py_err)
    }

    /// Add the next lateral/top-down pair.
    #[pyo3(signature = (seed = 0))]
    fn grow_tdm(&self, seed: u64) -> PyResult<Self> {
        Ok(PyDetector {
            inner: self.inner.grow_tdm(seed).map_err(py_err)?,
        })
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant().to_string()
    }

    #[getter]
    fn stage(&self) -> usize {
        self.inner.stage()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.num_values()
    }

    #[getter]
    fn feature_params(&self) -> usize {
        self.inner.feature_param_count()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Detections for an `[H, W, 3]` image as a list of dicts.
    fn detect(&self, py: Python<'_>, image: &PyTensor) -> PyResult<PyObject> {
        let dets = self.inner.detect(&image.inner).map_err(py_err)?;
        to_py_json(py, &dets)
    }
}

/// Same-padded or strided 2-D convolution; `w` is `[k, k, C_in, C_out]`.
#[pyfunction]
#[pyo3(signature = (x, w, b, stride = 1, pad = 0, dilation = 1))]
fn conv2d(x: &PyTensor, w: &PyTensor, b: &PyTensor, stride: usize, pad: usize, dilation: usize) -> PyResult<PyTensor> {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.inner.clone()), g.input(w.inner.clone()), g.input(b.inner.clone()));
    let y = g.conv2d(xv, wv, bv, ConvGeometry::new(stride, pad, dilation)).map_err(py_err)?;
    Ok(PyTensor {
        inner: g.value(y).clone(),
    })
}

/// 2x2 stride-2 max pooling; `ceil` keeps the partial last window.
#[pyfunction]
#[pyo3(signature = (x, ceil = false))]
fn maxpool2x(x: &PyTensor, ceil: bool) -> PyResult<PyTensor> {
    let r = if ceil { PoolRounding::Ceil } else { PoolRounding::Floor };
    let mut g = Graph::new();
    let xv = g.input(x.inner.clone());
    let y = g.maxpool2x(xv, [r, r]).map_err(py_err)?;
    Ok(PyTensor {
        inner: g.value(y).clone(),
    })
}

/// ROI max pooling of `[x1, y1, x2, y2]` image-space boxes.
#[pyfunction]
fn roi_pool(x: &PyTensor, rois: Vec<[f64; 4]>, stride: f64, out_h: usize, out_w: usize) -> PyResult<PyTensor> {
    let mut g = Graph::new();
    let xv = g.input(x.inner.clone());
    let y = g.roi_pool(xv, &rois, stride, out_h, out_w).map_err(py_err)?;
    Ok(PyTensor {
        inner: g.value(y).clone(),
    })
}

fn bbox(b: [f64; 4]) -> BBox {
    BBox::new(b[0], b[1], b[2], b[3])
}

#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    box_iou(&bbox(a), &bbox(b))
}

/// Indices of kept boxes, highest score first.
#[pyfunction]
fn nms(boxes: Vec<[f64; 4]>, scores: Vec<f64>, iou_thresh: f64) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err("boxes and scores differ in length"));
    }
    let boxes: Vec<BBox> = boxes.into_iter().map(bbox).collect();
    Ok(box_nms(&boxes, &scores, iou_thresh))
}

/// One synthetic scene: `(image tensor, annotation dict)`.
#[pyfunction]
#[pyo3(signature = (seed, image_id = 0, height = 128, width = 128))]
fn synth_scene(py: Python<'_>, seed: u64, image_id: u64, height: usize, width: usize) -> PyResult<(PyTensor, PyObject)> {
    let spec = SceneSpec {
        height,
        width,
        ..SceneSpec::default()
    };
    spec.validate().map_err(py_err)?;
    let (img, ann) = gen_scene(&spec, image_id, seed);
    Ok((PyTensor { inner: img.to_tensor() }, to_py_json(py, &ann)?))
}

/// Score detection records against annotation records (both lists of
/// dicts in the on-disk JSON layout).
#[pyfunction]
#[pyo3(signature = (dets, gts, num_classes, size_scale = 0.375))]
fn evaluate(
    py: Python<'_>,
    dets: &Bound<'_, PyList>,
    gts: &Bound<'_, PyList>,
    num_classes: usize,
    size_scale: f64,
) -> PyResult<PyObject> {
    let dets: Vec<DetectionRecord> = from_py_json(py, dets.as_any())?;
    let gts: Vec<AnnotationRecord> = from_py_json(py, gts.as_any())?;
    let report = eval_metrics(&dets, &gts, &EvalSpec::new(num_classes, size_scale)).map_err(py_err)?;
    to_py_json(py, &report)
}

#[pymodule]
fn tdm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyArch>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(maxpool2x, m)?)?;
    m.add_function(wrap_pyfunction!(roi_pool, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("real_type", tdm_core::experiment::real_type())?;
    Ok(())
}
