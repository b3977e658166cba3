//! Python bindings: box geometry, the cosine classifier, colour jitter,
//! evaluation, synthetic data, the detector, and whole experiments.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use fsodlab_core::augment::{color_jitter as jitter, ColorJitterSpec};
use fsodlab_core::datasets::{load_annotations, save_annotations, synth_generate, DomainStyle, SyntheticSceneConfig};
use fsodlab_core::detector::{self, BBox, Detection, DetectorConfig, GroundTruth};
use fsodlab_core::eval;
use fsodlab_core::head::{cosine_logits as cosine, CosineClassifierWeights};
use fsodlab_core::image::Image as CoreImage;
use fsodlab_core::pipeline::{self, ExperimentConfig};
use fsodlab_core::rng::Rng;
use fsodlab_core::tensor::{OptimizerConfig, Tensor};
use fsodlab_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn bbox(b: [f64; 4]) -> PyResult<BBox> {
    BBox::new(b[0], b[1], b[2], b[3]).map_err(py_err)
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Intersection over union of two `[x1, y1, x2, y2]` boxes.
#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    Ok(detector::iou(&bbox(a)?, &bbox(b)?))
}

/// Greedy NMS; returns kept indices by descending score.
#[pyfunction]
fn nms(boxes: Vec<[f64; 4]>, scores: Vec<f64>, iou_threshold: f64) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err("boxes and scores differ in length"));
    }
    let dets = boxes
        .into_iter()
        .zip(scores)
        .map(|(b, s)| Ok((bbox(b)?, s)))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(detector::nms(&dets, iou_threshold))
}

#[pyfunction]
fn encode_deltas(anchor: [f64; 4], gt: [f64; 4]) -> PyResult<[f64; 4]> {
    Ok(detector::encode_deltas(&bbox(anchor)?, &bbox(gt)?))
}

#[pyfunction]
fn decode_deltas(anchor: [f64; 4], deltas: [f64; 4]) -> PyResult<[f64; 4]> {
    Ok(detector::decode_deltas(&bbox(anchor)?, deltas).to_array())
}

/// `gamma * cos(x, w_j)` for every row `w_j` of `weights`.
#[pyfunction]
#[pyo3(signature = (x, weights, gamma = 20.0, eps = 1e-8))]
fn cosine_logits(x: Vec<f64>, weights: Vec<Vec<f64>>, gamma: f64, eps: f64) -> PyResult<Vec<f64>> {
    let d = x.len();
    if weights.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("every weight row must match len(x)"));
    }
    let c = weights.len();
    let w = Tensor::<f64>::new(vec![c, d], weights.concat()).map_err(py_err)?;
    let w = CosineClassifierWeights::new(w, gamma, eps).map_err(py_err)?;
    let x = Tensor::<f64>::new(vec![d], x).map_err(py_err)?;
    Ok(cosine(&x, &w).map_err(py_err)?.into_data())
}

/// COCO 101-point AP of `(score, is_true_positive)` pairs; `None` when
/// there are neither ground truths nor detections.
#[pyfunction]
fn average_precision(dets: Vec<(f64, bool)>, num_gt: usize) -> Option<f64> {
    eval::average_precision(&dets, num_gt)
}

/// mAP report (as a dict) for per-image detections `(box, class, score)` and
/// ground truths `(box, class)`.
#[pyfunction]
fn coco_map(
    py: Python<'_>,
    detections: Vec<Vec<([f64; 4], usize, f64)>>,
    ground_truths: Vec<Vec<([f64; 4], usize)>>,
    classes: Vec<String>,
) -> PyResult<Py<PyAny>> {
    let dets = detections
        .into_iter()
        .map(|im| {
            im.into_iter()
                .map(|(b, class_id, score)| Ok(Detection { bbox: bbox(b)?, class_id, score }))
                .collect::<PyResult<Vec<_>>>()
        })
        .collect::<PyResult<Vec<_>>>()?;
    let gts = ground_truths
        .into_iter()
        .map(|im| {
            im.into_iter()
                .map(|(b, class_id)| Ok(GroundTruth { bbox: bbox(b)?, class_id }))
                .collect::<PyResult<Vec<_>>>()
        })
        .collect::<PyResult<Vec<_>>>()?;
    let report = eval::coco_map(&dets, &gts, &classes).map_err(py_err)?;
    json_to_py(py, &serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))?)
}

/// RGB image with values in [0, 1].
#[pyclass(frozen, from_py_object)]
#[derive(Clone)]
struct Image {
    inner: CoreImage,
}

#[pymethods]
impl Image {
    /// From interleaved 8-bit RGB bytes.
    #[staticmethod]
    fn from_rgb8(width: usize, height: usize, data: &[u8]) -> PyResult<Self> {
        Ok(Image {
            inner: CoreImage::from_rgb8(width, height, data).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load_png(path: PathBuf) -> PyResult<Self> {
        Ok(Image {
            inner: CoreImage::load_png(&path).map_err(py_err)?,
        })
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_png(&path).map_err(py_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn pixel(&self, x: usize, y: usize) -> PyResult<[f32; 3]> {
        if x >= self.inner.width() || y >= self.inner.height() {
            return Err(PyValueError::new_err("pixel out of range"));
        }
        Ok(self.inner.get(x, y))
    }

    fn to_rgb8<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_rgb8())
    }
}

/// Seeded colour jitter.
#[pyfunction]
#[pyo3(signature = (image, seed, brightness = 0.4, contrast = 0.4, saturation = 0.4, hue = 0.1, apply_probability = 0.8))]
fn color_jitter(
    image: &Image,
    seed: u64,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    hue: f64,
    apply_probability: f64,
) -> PyResult<Image> {
    let spec = ColorJitterSpec {
        brightness,
        contrast,
        saturation,
        hue,
        apply_probability,
    };
    spec.validate().map_err(py_err)?;
    Ok(Image {
        inner: jitter(&image.inner, &spec, &mut Rng::new(seed)).map_err(py_err)?,
    })
}

/// Writes a synthetic dataset (annotation JSON plus PNGs) and returns the
/// number of images and annotations.
#[pyfunction]
#[pyo3(signature = (path, seed = 0, num_classes = 5, images = 100, domain = "base"))]
fn synth_dataset(path: PathBuf, seed: u64, num_classes: usize, images: usize, domain: &str) -> PyResult<(usize, usize)> {
    let domain_style = match domain {
        "base" => DomainStyle::Base,
        "target" => DomainStyle::Target,
        other => return Err(PyValueError::new_err(format!("unknown domain {other:?}"))),
    };
    let cfg = SyntheticSceneConfig {
        num_classes,
        images,
        domain_style,
        ..Default::default()
    };
    let set = synth_generate(&cfg, seed).map_err(py_err)?;
    save_annotations(&set, &path).map_err(py_err)?;
    Ok((set.images.len(), set.annotations.len()))
}

/// Images of an annotation file as `(image, [(box, class_index)])`, with
/// class indices following the file's category order.
#[pyfunction]
fn load_dataset(path: PathBuf) -> PyResult<(Vec<String>, Vec<(Image, Vec<([f64; 4], usize)>)>)> {
    let set = load_annotations(&path).map_err(py_err)?;
    let mut out = Vec::new();
    for im in &set.images {
        let gts = set
            .ground_truths(im.id)
            .into_iter()
            .map(|g| (g.bbox.to_array(), g.class_id))
            .collect();
        out.push((
            Image {
                inner: set.pixels(im.id).map_err(py_err)?.clone(),
            },
            gts,
        ));
    }
    Ok((set.category_names(), out))
}

/// The toy two-stage detector.
#[pyclass]
struct Detector {
    inner: detector::Detector,
    rng: Rng,
}

#[pymethods]
impl Detector {
    /// `config` is a JSON object with DetectorConfig fields.
    #[new]
    #[pyo3(signature = (num_classes, seed = 0, config = None))]
    fn new(num_classes: usize, seed: u64, config: Option<&str>) -> PyResult<Self> {
        let mut cfg: DetectorConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => DetectorConfig::default(),
        };
        cfg.num_classes = num_classes;
        Ok(Detector {
            inner: detector::Detector::new(cfg, seed).map_err(py_err)?,
            rng: Rng::new(seed).derive_named("python-train"),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Detector {
            inner: pipeline::load_checkpoint(&path).map_err(py_err)?,
            rng: Rng::new(0).derive_named("python-train"),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        pipeline::save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config().num_classes
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    fn num_parameters(&self) -> usize {
        self.inner.params().num_values()
    }

    /// `[(box, class, score)]` sorted by score.
    fn detect(&self, py: Python<'_>, image: &Image) -> PyResult<Vec<([f64; 4], usize, f64)>> {
        let dets = py.detach(|| self.inner.detect(&image.inner)).map_err(py_err)?;
        Ok(dets.into_iter().map(|d| (d.bbox.to_array(), d.class_id, d.score)).collect())
    }

    /// One SGD step on a batch of `(image, [(box, class)])`; returns the
    /// loss terms.
    #[pyo3(signature = (batch, learning_rate = 0.0025))]
    fn train_step(
        &mut self,
        py: Python<'_>,
        batch: Vec<(Image, Vec<([f64; 4], usize)>)>,
        learning_rate: f64,
    ) -> PyResult<Py<PyAny>> {
        let gts = batch
            .iter()
            .map(|(_, g)| {
                g.iter()
                    .map(|&(b, class_id)| Ok(GroundTruth { bbox: bbox(b)?, class_id }))
                    .collect::<PyResult<Vec<_>>>()
            })
            .collect::<PyResult<Vec<_>>>()?;
        let items: Vec<(&CoreImage, &[GroundTruth])> =
            batch.iter().zip(&gts).map(|((im, _), g)| (&im.inner, g.as_slice())).collect();
        let opt = OptimizerConfig {
            learning_rate,
            ..Default::default()
        };
        let (inner, rng) = (&mut self.inner, &mut self.rng);
        let losses = py.detach(|| inner.train_step(&items, &opt, rng)).map_err(py_err)?;
        json_to_py(py, &serde_json::to_string(&losses).map_err(|e| PyValueError::new_err(e.to_string()))?)
    }
}

/// Runs split, sampling, optional base training, fine-tuning, and
/// evaluation. `config` is an ExperimentConfig JSON object. Returns the
/// evaluation report.
#[pyfunction]
#[pyo3(signature = (config = None, seed = None))]
fn run_experiment(py: Python<'_>, config: Option<&str>, seed: Option<u64>) -> PyResult<Py<PyAny>> {
    let cfg: ExperimentConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    let seed = cfg.resolve_seed(seed).map_err(py_err)?;
    let res = py.detach(|| pipeline::run_experiment(&cfg, seed)).map_err(py_err)?;
    json_to_py(py, &serde_json::to_string(&res.report).map_err(|e| PyValueError::new_err(e.to_string()))?)
}

#[pymodule]
fn fsodlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(encode_deltas, m)?)?;
    m.add_function(wrap_pyfunction!(decode_deltas, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_logits, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(coco_map, m)?)?;
    m.add_function(wrap_pyfunction!(color_jitter, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<Image>()?;
    m.add_class::<Detector>()?;
    Ok(())
}
