//! Python bindings: configuration, datasets, training, inference, the MAC
//! counter and the box utilities of `dfft-core`.

use std::path::PathBuf;

use dfft_core::checkpoint::Checkpoint;
use dfft_core::config::{load_config, ModelConfig};
use dfft_core::data::{self, load_image};
use dfft_core::detection::{self as det, BBox, Detection, GroundTruth, MatchLabel, MatchParams};
use dfft_core::flops::{compare_single_vs_multilevel, macs_model, Group, MultilevelHead};
use dfft_core::train::{self, TrainOptions, TrainState};
use dfft_core::{Error, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Box4 = [f64; 4];

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Model, encoder, head and training settings.
#[pyclass(name = "Config", module = "dfft", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses a JSON document; missing keys take defaults.
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => ModelConfig::from_json(text).map_err(py_err)?,
            None => ModelConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_config(path).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.train.epochs
    }

    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.train.epochs = v;
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.train.batch_size
    }

    #[setter]
    fn set_batch_size(&mut self, v: usize) {
        self.inner.train.batch_size = v;
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.inner.train.lr
    }

    #[setter]
    fn set_lr(&mut self, v: f64) {
        self.inner.train.lr = v;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(num_classes={}, image_size={}, epochs={})",
            self.inner.num_classes, self.inner.image_size, self.inner.train.epochs
        )
    }
}

/// One image with its labelled boxes.
#[pyclass(name = "Sample", module = "dfft", from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: data::Sample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// Pixels as a nested `[H][W][3]` list in `[0, 1]`.
    #[getter]
    fn image(&self) -> Vec<Vec<[f64; 3]>> {
        to_nested(&self.inner.image)
    }

    #[getter]
    fn boxes(&self) -> Vec<Box4> {
        self.inner.gts.iter().map(|t| t.bbox.to_array()).collect()
    }

    #[getter]
    fn classes(&self) -> Vec<usize> {
        self.inner.gts.iter().map(|t| t.class).collect()
    }

    fn __repr__(&self) -> String {
        format!("Sample(id={:?}, boxes={})", self.inner.id, self.inner.gts.len())
    }
}

fn to_nested(t: &Tensor) -> Vec<Vec<[f64; 3]>> {
    let w = t.shape()[1];
    t.data()
        .chunks(w * 3)
        .map(|row| row.chunks(3).map(|p| [p[0], p[1], p[2]]).collect())
        .collect()
}

fn from_nested(image: Vec<Vec<[f64; 3]>>) -> PyResult<Tensor> {
    let h = image.len();
    let w = image.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || image.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image must be a non-empty [H][W][3] array"));
    }
    let data: Vec<f64> = image.into_iter().flatten().flatten().collect();
    Ok(Tensor::new(vec![h, w, 3], data))
}

fn detection_dict<'py>(py: Python<'py>, d: &Detection) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("box", d.bbox.to_array())?;
    out.set_item("class", d.class)?;
    out.set_item("score", d.score)?;
    Ok(out)
}

/// A detector with its weights and optimizer state.
#[pyclass(name = "Detector", module = "dfft")]
struct PyDetector {
    state: TrainState,
}

#[pymethods]
impl PyDetector {
    /// Freshly initialized model for `config` (defaults when omitted).
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<PyConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        Ok(Self {
            state: TrainState::new(cfg).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(path).map_err(py_err)?;
        Ok(Self {
            state: TrainState::from_checkpoint(&ckpt).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.state.to_checkpoint().save(path).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.state.detector.cfg.clone(),
        }
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.state.detector.store.num_scalars()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.state.epoch
    }

    /// Detections for one `[H][W][3]` image with values in `[0, 1]`.
    fn detect<'py>(&self, py: Python<'py>, image: Vec<Vec<[f64; 3]>>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let t = from_nested(image)?;
        let dets = py
            .detach(|| self.state.detector.infer(&[&t]))
            .map_err(py_err)?
            .remove(0);
        dets.iter().map(|d| detection_dict(py, d)).collect()
    }

    /// Letterboxes an image file to the model resolution and detects in it.
    /// Boxes are returned in the file's pixel coordinates.
    fn detect_file<'py>(&self, py: Python<'py>, path: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let (t, scale) = load_image(path, self.state.detector.cfg.image_size).map_err(py_err)?;
        let dets = py
            .detach(|| self.state.detector.infer(&[&t]))
            .map_err(py_err)?
            .remove(0);
        dets.iter()
            .map(|d| {
                detection_dict(
                    py,
                    &Detection {
                        bbox: d.bbox.scale(1.0 / scale),
                        ..*d
                    },
                )
            })
            .collect()
    }

    /// Trains in place up to `until_epoch` (default: the configured epochs).
    /// Returns one dict per completed epoch.
    #[pyo3(signature = (samples, until_epoch = None, max_steps = None, out_dir = None))]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        samples: Vec<PySample>,
        until_epoch: Option<usize>,
        max_steps: Option<u64>,
        out_dir: Option<PathBuf>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let data: Vec<data::Sample> = samples.into_iter().map(|s| s.inner).collect();
        let opts = TrainOptions {
            out_dir,
            max_steps,
            until_epoch,
            quiet: true,
        };
        let state = &mut self.state;
        let report = py.detach(|| train::train_from(state, &data, &opts)).map_err(py_err)?;
        report
            .logs
            .iter()
            .map(|l| {
                let d = PyDict::new(py);
                d.set_item("epoch", l.epoch)?;
                d.set_item("mean_loss", l.mean_loss)?;
                d.set_item("cls_loss", l.cls_loss)?;
                d.set_item("reg_loss", l.reg_loss)?;
                d.set_item("lr", l.lr)?;
                d.set_item("ap50", l.ap50)?;
                Ok(d)
            })
            .collect()
    }

    /// COCO-style AP, AP50, AP75 and per-class AP on `samples`.
    fn evaluate<'py>(&self, py: Python<'py>, samples: Vec<PySample>) -> PyResult<Bound<'py, PyDict>> {
        let data: Vec<data::Sample> = samples.into_iter().map(|s| s.inner).collect();
        let m = py
            .detach(|| dfft_core::eval::evaluate(&self.state.detector, &data))
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("ap", m.ap)?;
        d.set_item("ap50", m.ap50)?;
        d.set_item("ap75", m.ap75)?;
        d.set_item("per_class", m.per_class)?;
        Ok(d)
    }
}

#[pyfunction]
#[pyo3(signature = (n, image_size = 128, seed = 0))]
fn synth_dataset(n: usize, image_size: usize, seed: u64) -> PyResult<Vec<PySample>> {
    let samples = data::synth_dataset(n, image_size, seed).map_err(py_err)?;
    Ok(samples.into_iter().map(|inner| PySample { inner }).collect())
}

#[pyfunction]
fn load_coco(images_dir: PathBuf, annotations: PathBuf, image_size: usize) -> PyResult<(Vec<PySample>, Vec<String>)> {
    let set = data::load_coco(images_dir, annotations, image_size).map_err(py_err)?;
    Ok((set.samples.into_iter().map(|inner| PySample { inner }).collect(), set.categories))
}

/// Per-block MAC counts: `{"entries": [(name, group, macs)], "groups": {...}, "total": int}`.
#[pyfunction]
#[pyo3(signature = (config = None, height = 256, width = 256))]
fn flops<'py>(py: Python<'py>, config: Option<PyConfig>, height: usize, width: usize) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let r = macs_model(&cfg, height, width).map_err(py_err)?;
    let entries: Vec<(String, &str, u64)> = r.entries.iter().map(|e| (e.name.clone(), e.group.name(), e.macs)).collect();
    let groups = PyDict::new(py);
    for g in Group::ALL {
        groups.set_item(g.name(), r.group_total(g))?;
    }
    let d = PyDict::new(py);
    d.set_item("entries", entries)?;
    d.set_item("groups", groups)?;
    d.set_item("total", r.total())?;
    Ok(d)
}

/// `(single_level_macs, multilevel_macs, ratio)` for the neck and head.
#[pyfunction]
#[pyo3(signature = (config = None, height = 256, width = 256))]
fn compare_heads(config: Option<PyConfig>, height: usize, width: usize) -> PyResult<(u64, u64, f64)> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let c = compare_single_vs_multilevel(&cfg, &MultilevelHead::default(), height, width).map_err(py_err)?;
    Ok((c.single_macs, c.multilevel_macs, c.ratio))
}

#[pyfunction]
fn iou(a: Box4, b: Box4) -> f64 {
    det::iou(&BBox::from_array(a), &BBox::from_array(b))
}

#[pyfunction]
fn giou(a: Box4, b: Box4) -> f64 {
    det::giou(&BBox::from_array(a), &BBox::from_array(b))
}

#[pyfunction]
#[pyo3(signature = (logits, targets, alpha = 0.25, gamma = 2.0))]
fn focal_loss(logits: Vec<f64>, targets: Vec<f64>, alpha: f64, gamma: f64) -> PyResult<f64> {
    if logits.len() != targets.len() {
        return Err(PyValueError::new_err("logits and targets differ in length"));
    }
    Ok(det::focal_loss(&logits, &targets, alpha, gamma))
}

#[pyfunction]
fn encode_deltas(anchor: Box4, gt: Box4) -> PyResult<Box4> {
    det::encode_deltas(&BBox::from_array(anchor), &BBox::from_array(gt)).map_err(py_err)
}

#[pyfunction]
fn decode_box(anchor: Box4, deltas: Box4) -> Box4 {
    det::decode_boxes(&BBox::from_array(anchor), &deltas).to_array()
}

#[pyfunction]
#[pyo3(signature = (feat_h, feat_w, stride = 32, sizes = vec![32.0, 64.0, 128.0, 256.0, 512.0]))]
fn generate_anchors(feat_h: usize, feat_w: usize, stride: usize, sizes: Vec<f64>) -> PyResult<Vec<Box4>> {
    let a = det::generate_anchors(feat_h, feat_w, stride, &sizes).map_err(py_err)?;
    Ok(a.anchors.iter().map(BBox::to_array).collect())
}

/// Per-anchor labels: the matched box index for positives, -1 for
/// negatives and -2 for ignored anchors.
#[pyfunction]
#[pyo3(signature = (anchors, gts, k = 4, neg_ignore_iou = 0.7, pos_ignore_iou = 0.15))]
fn uniform_match(anchors: Vec<Box4>, gts: Vec<Box4>, k: usize, neg_ignore_iou: f64, pos_ignore_iou: f64) -> PyResult<Vec<i64>> {
    let a: Vec<BBox> = anchors.into_iter().map(BBox::from_array).collect();
    let g: Vec<BBox> = gts.into_iter().map(BBox::from_array).collect();
    let p = MatchParams {
        k,
        neg_ignore_iou,
        pos_ignore_iou,
    };
    let m = det::uniform_match(&a, &g, &p).map_err(py_err)?;
    Ok(m.labels
        .iter()
        .map(|l| match l {
            MatchLabel::Positive(i) => *i as i64,
            MatchLabel::Negative => -1,
            MatchLabel::Ignore => -2,
        })
        .collect())
}

/// Class-wise NMS over `(box, class, score)` triples; returns kept indices'
/// triples in descending score order.
#[pyfunction]
#[pyo3(signature = (dets, iou_thresh = 0.6, score_thresh = 0.05, max_dets = 100))]
fn nms(dets: Vec<(Box4, usize, f64)>, iou_thresh: f64, score_thresh: f64, max_dets: usize) -> Vec<(Box4, usize, f64)> {
    let d: Vec<Detection> = dets
        .into_iter()
        .map(|(b, class, score)| Detection {
            bbox: BBox::from_array(b),
            class,
            score,
        })
        .collect();
    det::nms(&d, iou_thresh, score_thresh, max_dets)
        .into_iter()
        .map(|d| (d.bbox.to_array(), d.class, d.score))
        .collect()
}

/// Ground truth as `(box, class)` pairs for building custom samples.
#[pyfunction]
fn make_sample(id: String, image: Vec<Vec<[f64; 3]>>, gts: Vec<(Box4, usize)>) -> PyResult<PySample> {
    let image = from_nested(image)?;
    let gts = gts
        .into_iter()
        .map(|(b, class)| GroundTruth {
            bbox: BBox::from_array(b),
            class,
        })
        .collect();
    Ok(PySample {
        inner: data::Sample { id, image, gts },
    })
}

#[pymodule]
fn dfft(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_coco, m)?)?;
    m.add_function(wrap_pyfunction!(make_sample, m)?)?;
    m.add_function(wrap_pyfunction!(flops, m)?)?;
    m.add_function(wrap_pyfunction!(compare_heads, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(encode_deltas, m)?)?;
    m.add_function(wrap_pyfunction!(decode_box, m)?)?;
    m.add_function(wrap_pyfunction!(generate_anchors, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_match, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    Ok(())
}
