//! Python bindings for the fewshot crate: tensors, glyph data, detection
//! scenes, and the experiment entry points, exposed as the `fewshot_rs`
//! module.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fewshot::datasets::{generate_glyph_dataset, split_classes, GlyphSpec, LabeledImageSet};
use fewshot::detection::{self, Detection, GtBox, SceneSpec};
use fewshot::harness::{
    apply_overrides, config_hash, gradcheck_report, parse_config, report_ci as ci_line,
    run_experiment, Budget, MAX_WALL_SECONDS,
};
use fewshot::rng::SeedTree;
use fewshot::tensor::{softmax, Tensor};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Dense row-major float tensor. Operations run without gradient tracking;
/// training happens inside the experiment entry points.
#[pyclass(unsendable, name = "Tensor")]
struct PyTensor {
    inner: Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: Tensor::from_vec(data, &shape).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor {
            inner: Tensor::zeros(&shape),
        }
    }

    #[staticmethod]
    fn ones(shape: Vec<usize>) -> Self {
        PyTensor {
            inner: Tensor::ones(&shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn item(&self) -> PyResult<f32> {
        if self.inner.data().len() != 1 {
            return Err(value_err("item() needs a single-element tensor"));
        }
        Ok(self.inner.item())
    }

    fn add(&self, other: &PyTensor) -> PyResult<Self> {
        Ok(PyTensor {
            inner: self.inner.add(&other.inner).map_err(value_err)?,
        })
    }

    fn sub(&self, other: &PyTensor) -> PyResult<Self> {
        Ok(PyTensor {
            inner: self.inner.sub(&other.inner).map_err(value_err)?,
        })
    }

    fn mul(&self, other: &PyTensor) -> PyResult<Self> {
        Ok(PyTensor {
            inner: self.inner.mul(&other.inner).map_err(value_err)?,
        })
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<Self> {
        Ok(PyTensor {
            inner: self.inner.matmul(&other.inner).map_err(value_err)?,
        })
    }

    fn scale(&self, c: f64) -> Self {
        PyTensor {
            inner: self.inner.scale(c),
        }
    }

    fn relu(&self) -> Self {
        PyTensor {
            inner: self.inner.relu(),
        }
    }

    fn sigmoid(&self) -> Self {
        PyTensor {
            inner: self.inner.sigmoid(),
        }
    }

    fn transpose(&self) -> Self {
        PyTensor {
            inner: self.inner.transpose2(),
        }
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: self.inner.reshape(&shape).map_err(value_err)?,
        })
    }

    /// Row-wise softmax of a [rows, cols] tensor.
    fn softmax(&self) -> Self {
        PyTensor {
            inner: softmax(&self.inner),
        }
    }

    fn sum(&self) -> f32 {
        self.inner.sum_all().item()
    }

    fn mean(&self) -> f32 {
        self.inner.mean_all().item()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Procedurally generated glyph classification corpus.
#[pyclass(name = "GlyphDataset")]
struct PyGlyphDataset {
    height: usize,
    width: usize,
    images: Vec<Vec<f32>>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl PyGlyphDataset {
    fn from_set(set: LabeledImageSet) -> Self {
        PyGlyphDataset {
            height: set.height,
            width: set.width,
            n_classes: set.n_classes(),
            images: set.images,
            labels: set.labels,
        }
    }
}

#[pymethods]
impl PyGlyphDataset {
    #[staticmethod]
    #[pyo3(signature = (n_classes, samples_per_class, image_size, seed))]
    fn generate(n_classes: usize, samples_per_class: usize, image_size: usize, seed: u64) -> Self {
        let spec = GlyphSpec {
            n_classes,
            samples_per_class,
            image_size,
            ..GlyphSpec::default()
        };
        PyGlyphDataset::from_set(generate_glyph_dataset(&spec, seed))
    }

    fn __len__(&self) -> usize {
        self.images.len()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    #[getter]
    fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn image(&self, i: usize) -> PyResult<Vec<f32>> {
        self.images
            .get(i)
            .cloned()
            .ok_or_else(|| value_err(format!("image index {i} out of range")))
    }

    fn label(&self, i: usize) -> PyResult<usize> {
        self.labels
            .get(i)
            .copied()
            .ok_or_else(|| value_err(format!("label index {i} out of range")))
    }
}

/// Disjoint train/val/test class pools.
#[pyfunction]
fn split_class_pools(
    n_classes: usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let s = split_classes(n_classes, ratios, seed).map_err(value_err)?;
    Ok((s.train, s.val, s.test))
}

/// Renders one detection scene; returns (pixels, boxes) where pixels is a
/// flat [3, size, size] RGB array and each box is (class, cx, cy, w, h) in
/// unit coordinates.
#[pyfunction]
#[pyo3(signature = (class_ids, image_size, seed))]
fn render_scene(
    class_ids: Vec<usize>,
    image_size: usize,
    seed: u64,
) -> PyResult<(Vec<f32>, Vec<(usize, f64, f64, f64, f64)>)> {
    let n = detection::n_detection_classes();
    if class_ids.iter().any(|&c| c >= n) {
        return Err(value_err(format!("class ids must be below {n}")));
    }
    let spec = SceneSpec {
        image_size,
        ..SceneSpec::default()
    };
    let mut rng = SeedTree::new(seed).derive("py-scene").rng();
    let img = detection::render_scene(&class_ids, &spec, &mut rng);
    let boxes = img
        .boxes
        .iter()
        .map(|b| (b.class, b.cx, b.cy, b.w, b.h))
        .collect();
    Ok((img.pixels, boxes))
}

/// Names of the shape-color detection classes, indexed by class id.
#[pyfunction]
fn detection_class_names() -> Vec<String> {
    detection::detection_class_names()
}

/// Intersection-over-union of two (cx, cy, w, h) boxes.
#[pyfunction]
fn box_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let g = |t: (f64, f64, f64, f64)| GtBox {
        class: 0,
        cx: t.0,
        cy: t.1,
        w: t.2,
        h: t.3,
    };
    detection::iou(&g(a), &g(b))
}

/// Per-class greedy non-maximum suppression over (class, conf, cx, cy, w, h)
/// detections.
#[pyfunction]
fn nms(
    dets: Vec<(usize, f64, f64, f64, f64, f64)>,
    iou_thresh: f64,
) -> Vec<(usize, f64, f64, f64, f64, f64)> {
    let dets = dets
        .into_iter()
        .map(|(class, conf, cx, cy, w, h)| Detection {
            class,
            conf,
            cx,
            cy,
            w,
            h,
        })
        .collect();
    detection::nms(dets, iou_thresh)
        .into_iter()
        .map(|d| (d.class, d.conf, d.cx, d.cy, d.w, d.h))
        .collect()
}

/// Parses a `key: value` config and returns its canonical echo.
#[pyfunction]
#[pyo3(signature = (text, overrides = vec![]))]
fn config_echo(text: &str, overrides: Vec<String>) -> PyResult<String> {
    let mut cfg = parse_config(text).map_err(value_err)?;
    apply_overrides(&mut cfg, &overrides).map_err(value_err)?;
    Ok(cfg.echo())
}

/// Parses a config, runs the experiment it describes, and returns a dict
/// with the run id, output directory, and headline metric.
#[pyfunction]
#[pyo3(signature = (text, overrides = vec![], max_seconds = None))]
fn run<'py>(
    py: Python<'py>,
    text: &str,
    overrides: Vec<String>,
    max_seconds: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = parse_config(text).map_err(value_err)?;
    apply_overrides(&mut cfg, &overrides).map_err(value_err)?;
    cfg.validate().map_err(value_err)?;
    let budget = Budget::seconds(max_seconds.unwrap_or(MAX_WALL_SECONDS));
    let outcome = run_experiment(&cfg, &budget).map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("run_id", &outcome.run_id)?;
    out.set_item("dir", outcome.dir.to_string_lossy())?;
    out.set_item("method", &outcome.method)?;
    out.set_item("mean", outcome.mean)?;
    out.set_item("ci95", outcome.ci95)?;
    out.set_item("summary", &outcome.summary)?;
    out.set_item("config_hash", config_hash(&cfg))?;
    Ok(out)
}

/// Finite-difference check of every differentiable op; returns the
/// printable report and whether all checks passed.
#[pyfunction]
#[pyo3(signature = (n_seeds = 3))]
fn gradcheck(n_seeds: u64) -> (String, bool) {
    gradcheck_report(n_seeds)
}

/// "mean ± half-width" percent line for a list of per-task scores.
#[pyfunction]
fn report_ci(values: Vec<f64>) -> PyResult<String> {
    ci_line(&values).map_err(value_err)
}

#[pymodule]
fn fewshot_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyGlyphDataset>()?;
    m.add_function(wrap_pyfunction!(split_class_pools, m)?)?;
    m.add_function(wrap_pyfunction!(render_scene, m)?)?;
    m.add_function(wrap_pyfunction!(detection_class_names, m)?)?;
    m.add_function(wrap_pyfunction!(box_iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(config_echo, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(report_ci, m)?)?;
    Ok(())
}
