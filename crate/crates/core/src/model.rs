//! Whole-detector assembly: backbone, encoders and head over one ParamStore.

use crate::autograd::Graph;
use crate::backbone::{forward_backbone, BackboneOutput};
use crate::config::{ModelConfig, PreprocessConfig};
use crate::detection::{
    detection_loss, generate_anchors, postprocess, predict, AnchorSet, Detection, GroundTruth, LossTerms, Prediction,
};
use crate::encoders::{sae, tae, TaskFeatures, SAE_STRIDE};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::primitives::FeatureMap;
use crate::tensor::Tensor;

pub struct ForwardOutput {
    pub backbone: BackboneOutput,
    pub sae: FeatureMap,
    pub task: TaskFeatures,
    pub pred: Prediction,
}

/// Runs the full network on a normalized `(N, H, W, 3)` batch.
pub fn forward_model(g: &mut Graph, cfg: &ModelConfig, images: Tensor) -> Result<ForwardOutput> {
    let x = FeatureMap::input(g, images, 1, false)?;
    if x.channels != 3 {
        return Err(Error::shape(format!("expected 3-channel images, got {}", x.channels)));
    }
    let backbone = forward_backbone(g, &x, &cfg.backbone, "backbone")?;
    let s = sae(g, &backbone, &cfg.encoder, "sae")?;
    let task = tae(g, &s, &cfg.encoder, "tae")?;
    let pred = predict(
        g,
        &task.t_cls,
        &task.t_reg,
        cfg.num_classes,
        cfg.head.anchors_per_cell(),
        "head",
    )?;
    Ok(ForwardOutput {
        backbone,
        sae: s,
        task,
        pred,
    })
}

/// Scales `[0, 1]` HWC images by the configured per-channel statistics and
/// stacks them, optionally mirrored left-right.
pub fn preprocess(images: &[&Tensor], pp: &PreprocessConfig, flip: &[bool]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape(format!("image tensor must be (H, W, 3), got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(images.len() * h * w * 3);
    for (n, img) in images.iter().enumerate() {
        if img.shape() != shape.as_slice() {
            return Err(Error::shape("images in a batch must share one size"));
        }
        let d = img.data();
        let mirror = flip.get(n).copied().unwrap_or(false);
        for y in 0..h {
            for x in 0..w {
                let sx = if mirror { w - 1 - x } else { x };
                for c in 0..3 {
                    out.push((d[(y * w + sx) * 3 + c] - pp.mean[c]) / pp.std[c]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![images.len(), h, w, 3], out))
}

/// Mirrors boxes left-right within an image of width `w`.
pub fn flip_gts(gts: &[GroundTruth], w: f64) -> Vec<GroundTruth> {
    gts.iter()
        .map(|t| {
            let mut b = t.bbox;
            (b.x1, b.x2) = (w - t.bbox.x2, w - t.bbox.x1);
            GroundTruth { bbox: b, class: t.class }
        })
        .collect()
}

/// A configured detector and its weights.
#[derive(Clone)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl Detector {
    /// Initializes every parameter by tracing one forward pass.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.train.seed);
        {
            let s = cfg.image_size;
            let mut g = Graph::building(&mut store);
            forward_model(&mut g, &cfg, Tensor::zeros(&[1, s, s, 3]))?;
        }
        store.freeze();
        Ok(Self { cfg, store })
    }

    /// Wraps restored weights, checking they cover the configured network.
    pub fn from_parts(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let fresh = Self::new(cfg.clone())?;
        for p in fresh.store.iter() {
            let found = store.get(&p.name)?;
            if found.value.shape() != p.value.shape() {
                return Err(Error::ParamShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: found.value.shape().to_vec(),
                });
            }
        }
        if store.len() != fresh.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, the configured model {}",
                store.len(),
                fresh.store.len()
            )));
        }
        let mut store = store;
        store.freeze();
        Ok(Self { cfg, store })
    }

    pub fn anchors(&self, height: usize, width: usize) -> Result<AnchorSet> {
        generate_anchors(
            height / SAE_STRIDE,
            width / SAE_STRIDE,
            SAE_STRIDE,
            &self.cfg.head.anchor_sizes,
        )
    }

    /// Forward plus loss on a batch; gradients are left to the caller.
    pub fn loss<'a>(&'a self, g: &mut Graph<'a>, images: Tensor, gts: &[Vec<GroundTruth>]) -> Result<LossTerms> {
        let (h, w) = (images.shape()[1], images.shape()[2]);
        let out = forward_model(g, &self.cfg, images)?;
        let anchors = self.anchors(h, w)?;
        detection_loss(g, &out.pred, &anchors, gts, self.cfg.num_classes, &self.cfg.head)
    }

    /// Detections for each `[0, 1]` HWC image.
    pub fn infer(&self, images: &[&Tensor]) -> Result<Vec<Vec<Detection>>> {
        let batch = preprocess(images, &self.cfg.preprocess, &[])?;
        let (h, w) = (batch.shape()[1], batch.shape()[2]);
        let mut g = Graph::new(&self.store);
        let out = forward_model(&mut g, &self.cfg, batch)?;
        let anchors = self.anchors(h, w)?;
        let nc = self.cfg.num_classes;
        let per = anchors.len();
        let logits = g.value(out.pred.logits).data();
        let deltas = g.value(out.pred.deltas).data();
        Ok((0..images.len())
            .map(|n| {
                postprocess(
                    &logits[n * per * nc..(n + 1) * per * nc],
                    &deltas[n * per * 4..(n + 1) * per * 4],
                    &anchors,
                    nc,
                    w as f64,
                    h as f64,
                    &self.cfg.head,
                )
            })
            .collect())
    }
}
