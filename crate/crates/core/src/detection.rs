//! Single-level anchor-based dense prediction: anchors, box coding, uniform
//! matching, focal and GIoU losses, the linear prediction head and NMS.

use std::cmp::Ordering;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{focal_term, giou_with_grad, Graph, Var};
use crate::error::{Error, Result};
use crate::params::Init;
use crate::primitives::FeatureMap;

/// Axis-aligned box in image pixels, corner form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU; 0 when both boxes are degenerate.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    giou_with_grad(&a.to_array(), &b.to_array()).0
}

pub fn giou_loss(pred: &BBox, gt: &BBox) -> f64 {
    1.0 - giou(pred, gt)
}

/// Summed elementwise sigmoid focal loss.
pub fn focal_loss(logits: &[f64], targets: &[f64], alpha: f64, gamma: f64) -> f64 {
    assert_eq!(logits.len(), targets.len());
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| focal_term(z, t, alpha, gamma).0)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub anchor_sizes: Vec<f64>,
    /// Positives per ground-truth box in uniform matching.
    pub match_k: usize,
    pub neg_ignore_iou: f64,
    pub pos_ignore_iou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub cls_weight: f64,
    pub reg_weight: f64,
    pub nms_iou: f64,
    pub score_thresh: f64,
    pub max_dets: usize,
    /// Candidates kept per image before NMS.
    pub pre_nms_top_k: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            anchor_sizes: vec![32.0, 64.0, 128.0, 256.0, 512.0],
            match_k: 4,
            neg_ignore_iou: 0.7,
            pos_ignore_iou: 0.15,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            cls_weight: 1.0,
            reg_weight: 2.0,
            nms_iou: 0.6,
            score_thresh: 0.05,
            max_dets: 100,
            pre_nms_top_k: 1000,
        }
    }
}

impl HeadConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len()
    }

    pub fn match_params(&self) -> MatchParams {
        MatchParams {
            k: self.match_k,
            neg_ignore_iou: self.neg_ignore_iou,
            pos_ignore_iou: self.pos_ignore_iou,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchor_sizes.is_empty() || self.anchor_sizes.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("head.anchor_sizes must be a non-empty list of positive sizes"));
        }
        if self.match_k == 0 {
            return Err(Error::config("head.match_k must be at least 1"));
        }
        for (field, v) in [
            ("neg_ignore_iou", self.neg_ignore_iou),
            ("pos_ignore_iou", self.pos_ignore_iou),
            ("focal_alpha", self.focal_alpha),
            ("nms_iou", self.nms_iou),
            ("score_thresh", self.score_thresh),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("head.{field} must lie in [0, 1]")));
            }
        }
        if self.focal_gamma < 0.0 || self.cls_weight < 0.0 || self.reg_weight < 0.0 {
            return Err(Error::config("head loss weights and focal_gamma must be non-negative"));
        }
        if self.max_dets == 0 || self.pre_nms_top_k == 0 {
            return Err(Error::config("head.max_dets and head.pre_nms_top_k must be positive"));
        }
        Ok(())
    }
}

/// Square anchors on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<BBox>,
    pub sizes: Vec<f64>,
    pub feat_h: usize,
    pub feat_w: usize,
    pub stride: usize,
}

impl AnchorSet {
    pub fn per_cell(&self) -> usize {
        self.sizes.len()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Anchors centred on every cell, ordered by row, then column, then size.
pub fn generate_anchors(feat_h: usize, feat_w: usize, stride: usize, sizes: &[f64]) -> Result<AnchorSet> {
    if sizes.is_empty() {
        return Err(Error::config("anchor sizes must not be empty"));
    }
    if feat_h == 0 || feat_w == 0 || stride == 0 {
        return Err(Error::config("anchor grid dimensions and stride must be positive"));
    }
    let s = stride as f64;
    let anchors = (0..feat_h)
        .flat_map(|i| (0..feat_w).map(move |j| (i, j)))
        .flat_map(|(i, j)| {
            let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
            sizes
                .iter()
                .map(move |&sz| BBox::new(cx - sz / 2.0, cy - sz / 2.0, cx + sz / 2.0, cy + sz / 2.0))
        })
        .collect();
    Ok(AnchorSet {
        anchors,
        sizes: sizes.to_vec(),
        feat_h,
        feat_w,
        stride,
    })
}

/// `(dx, dy, dw, dh)` taking `anchor` to `gt` in centre/size form.
pub fn encode_deltas(anchor: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (gw, gh) = (gt.width(), gt.height());
    if !(aw > 0.0 && ah > 0.0) {
        return Err(Error::Coding(format!("anchor {anchor:?} has non-positive size")));
    }
    if !(gw > 0.0 && gh > 0.0) {
        return Err(Error::Coding(format!("target {gt:?} has non-positive size")));
    }
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    Ok([(gx - ax) / aw, (gy - ay) / ah, (gw / aw).ln(), (gh / ah).ln()])
}

/// Inverse of [`encode_deltas`]; log-scales are capped before `exp`.
pub fn decode_boxes(anchor: &BBox, deltas: &[f64; 4]) -> BBox {
    BBox::from_array(crate::autograd::decode_one(&anchor.to_array(), deltas))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchParams {
    pub k: usize,
    pub neg_ignore_iou: f64,
    pub pos_ignore_iou: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        HeadConfig::default().match_params()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchLabel {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment {
    pub labels: Vec<MatchLabel>,
    /// `(anchor, gt)` pairs chosen before IoU-based ignore filtering.
    pub matched: Vec<(usize, usize)>,
}

impl MatchAssignment {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| matches!(l, MatchLabel::Positive(_))).count()
    }
}

/// Preference key of an (anchor, gt) pair: centre distance, then how well
/// the box shapes agree (L1 over corners), then anchor geometry.
#[derive(Clone, Copy, Debug)]
struct PairKey {
    center: f64,
    shape: f64,
}

fn pair_key(a: &BBox, g: &BBox) -> PairKey {
    let (ax, ay) = a.center();
    let (gx, gy) = g.center();
    PairKey {
        center: ((ax - gx).powi(2) + (ay - gy).powi(2)).sqrt(),
        shape: (a.x1 - g.x1).abs() + (a.y1 - g.y1).abs() + (a.x2 - g.x2).abs() + (a.y2 - g.y2).abs(),
    }
}

fn cmp_key(a: &PairKey, b: &PairKey) -> Ordering {
    a.center.total_cmp(&b.center).then(a.shape.total_cmp(&b.shape))
}

fn cmp_geometry(a: &BBox, b: &BBox) -> Ordering {
    a.to_array()
        .iter()
        .zip(b.to_array().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Uniform matching: every ground-truth box receives exactly `k` positive
/// anchors, the `k` nearest by centre distance that it can hold. An anchor is
/// positive for at most one box; when boxes compete the nearer box keeps the
/// anchor and the other moves on to its next-nearest anchor (a box-proposing
/// stable assignment). Afterwards, negatives overlapping any box by more than
/// `neg_ignore_iou` and positives overlapping their box by less than
/// `pos_ignore_iou` become ignored.
pub fn uniform_match(anchors: &[BBox], gts: &[BBox], params: &MatchParams) -> Result<MatchAssignment> {
    let (na, ng) = (anchors.len(), gts.len());
    if params.k == 0 {
        return Err(Error::config("match k must be at least 1"));
    }
    if params.k > na || params.k * ng > na {
        return Err(Error::config(format!(
            "cannot give {ng} boxes {} anchors each from {na} anchors",
            params.k
        )));
    }
    let keys: Vec<Vec<PairKey>> = gts
        .iter()
        .map(|g| anchors.iter().map(|a| pair_key(a, g)).collect())
        .collect();

    // each box's anchors in preference order
    let prefs: Vec<Vec<usize>> = (0..ng)
        .map(|gi| {
            let mut order: Vec<usize> = (0..na).collect();
            order.sort_by(|&a, &b| {
                cmp_key(&keys[gi][a], &keys[gi][b])
                    .then_with(|| cmp_geometry(&anchors[a], &anchors[b]))
                    .then(a.cmp(&b))
            });
            order
        })
        .collect();
    // anchor prefers g over h
    let prefers = |a: usize, g: usize, h: usize| cmp_key(&keys[g][a], &keys[h][a]).then(g.cmp(&h)).is_lt();

    let mut holder: Vec<Option<usize>> = vec![None; na];
    let mut next = vec![0usize; ng];
    let mut free: Vec<(usize, usize)> = (0..ng).rev().map(|g| (g, params.k)).collect();
    while let Some((g, mut need)) = free.pop() {
        while need > 0 {
            let a = prefs[g][next[g]];
            next[g] += 1;
            match holder[a] {
                None => {
                    holder[a] = Some(g);
                    need -= 1;
                }
                Some(h) if prefers(a, g, h) => {
                    holder[a] = Some(g);
                    need -= 1;
                    free.push((h, 1));
                }
                Some(_) => {}
            }
        }
    }

    let mut matched = Vec::with_capacity(params.k * ng);
    let mut labels = vec![MatchLabel::Negative; na];
    for (a, h) in holder.iter().enumerate() {
        if let Some(g) = *h {
            matched.push((a, g));
            labels[a] = if iou(&anchors[a], &gts[g]) < params.pos_ignore_iou {
                MatchLabel::Ignore
            } else {
                MatchLabel::Positive(g)
            };
        } else if gts.iter().any(|g| iou(&anchors[a], g) > params.neg_ignore_iou) {
            labels[a] = MatchLabel::Ignore;
        }
    }
    Ok(MatchAssignment { labels, matched })
}

/// Raw head outputs for a batch, flattened in anchor order per image.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    /// `(batch * cells * K, num_classes)`
    pub logits: Var,
    /// `(batch * cells * K, 4)`
    pub deltas: Var,
    pub batch: usize,
    pub anchors_per_image: usize,
}

/// Prior probability the classification bias is initialized to.
const PRIOR_PROB: f64 = 0.01;

/// One linear map per task on top of the aligned features.
pub fn predict(
    g: &mut Graph,
    t_cls: &FeatureMap,
    t_reg: &FeatureMap,
    num_classes: usize,
    k: usize,
    name: &str,
) -> Result<Prediction> {
    if (t_cls.batch, t_cls.height, t_cls.width) != (t_reg.batch, t_reg.height, t_reg.width) {
        return Err(Error::shape(format!(
            "{name}: classification map {:?} and regression map {:?} differ spatially",
            t_cls.dims(),
            t_reg.dims()
        )));
    }
    if num_classes == 0 || k == 0 {
        return Err(Error::config("head needs at least one class and one anchor per cell"));
    }
    let rows = t_cls.cells() * k;
    let prior_bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
    let wc = g.param(
        &format!("{name}.cls.weight"),
        &[t_cls.channels, k * num_classes],
        Init::TruncNormal(0.02),
    )?;
    let bc = g.param(&format!("{name}.cls.bias"), &[k * num_classes], Init::Const(prior_bias))?;
    let logits = g.linear(t_cls.var, wc, Some(bc));
    let logits = g.reshape(logits, &[rows, num_classes]);
    let wr = g.param(&format!("{name}.reg.weight"), &[t_reg.channels, k * 4], Init::TruncNormal(0.02))?;
    let br = g.param(&format!("{name}.reg.bias"), &[k * 4], Init::Zeros)?;
    let deltas = g.linear(t_reg.var, wr, Some(br));
    let deltas = g.reshape(deltas, &[rows, 4]);
    Ok(Prediction {
        logits,
        deltas,
        batch: t_cls.batch,
        anchors_per_image: t_cls.height * t_cls.width * k,
    })
}

/// Ground-truth box with its class id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
    pub num_pos: usize,
}

/// Focal classification loss over non-ignored anchors plus GIoU regression
/// loss over positives, both normalized by the batch's positive count.
pub fn detection_loss(
    g: &mut Graph,
    pred: &Prediction,
    anchors: &AnchorSet,
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
    cfg: &HeadConfig,
) -> Result<LossTerms> {
    if gts.len() != pred.batch || anchors.len() != pred.anchors_per_image {
        return Err(Error::shape("loss targets do not match the prediction batch"));
    }
    let per = anchors.len();
    let mut targets = vec![0.0; pred.batch * per * num_classes];
    let mut weights = vec![0.0; pred.batch * per];
    let mut pos_rows = Vec::new();
    let mut pos_anchors = Vec::new();
    let mut pos_gts = Vec::new();
    for (b, image_gts) in gts.iter().enumerate() {
        let boxes: Vec<BBox> = image_gts.iter().map(|t| t.bbox).collect();
        let m = uniform_match(&anchors.anchors, &boxes, &cfg.match_params())?;
        for (a, label) in m.labels.iter().enumerate() {
            let row = b * per + a;
            match *label {
                MatchLabel::Positive(gi) => {
                    let cls = image_gts[gi].class;
                    if cls >= num_classes {
                        return Err(Error::Data(format!("class id {cls} >= {num_classes}")));
                    }
                    weights[row] = 1.0;
                    targets[row * num_classes + cls] = 1.0;
                    pos_rows.push(row);
                    pos_anchors.push(anchors.anchors[a].to_array());
                    pos_gts.push(image_gts[gi].bbox.to_array());
                }
                MatchLabel::Negative => weights[row] = 1.0,
                MatchLabel::Ignore => {}
            }
        }
    }
    let num_pos = pos_rows.len();
    let norm = num_pos.max(1) as f64;
    let cls = g.focal_loss(pred.logits, &targets, &weights, cfg.focal_alpha, cfg.focal_gamma, norm);
    let reg = if num_pos > 0 {
        let d = g.gather_rows(pred.deltas, Rc::new(pos_rows), 4, &[num_pos, 4]);
        let boxes = g.decode_boxes(d, Rc::new(pos_anchors));
        g.giou_loss(boxes, &pos_gts, norm)
    } else {
        g.constant(crate::tensor::Tensor::scalar(0.0))
    };
    let wc = g.mul_scalar(cls, cfg.cls_weight);
    let wr = g.mul_scalar(reg, cfg.reg_weight);
    let total = g.add(wc, wr);
    Ok(LossTerms {
        total,
        cls,
        reg,
        num_pos,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

fn by_score_desc(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score)
}

/// Class-wise greedy non-maximum suppression.
pub fn nms(dets: &[Detection], iou_thresh: f64, score_thresh: f64, max_dets: usize) -> Vec<Detection> {
    let mut cands: Vec<Detection> = dets.iter().copied().filter(|d| d.score >= score_thresh).collect();
    cands.sort_by(by_score_desc);
    let mut kept: Vec<Detection> = Vec::new();
    for d in cands {
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
            if kept.len() == max_dets {
                break;
            }
        }
    }
    kept
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Turns one image's head outputs into clipped, suppressed detections.
pub fn postprocess(
    logits: &[f64],
    deltas: &[f64],
    anchors: &AnchorSet,
    num_classes: usize,
    image_w: f64,
    image_h: f64,
    cfg: &HeadConfig,
) -> Vec<Detection> {
    assert_eq!(logits.len(), anchors.len() * num_classes);
    assert_eq!(deltas.len(), anchors.len() * 4);
    let mut cands: Vec<(f64, usize, usize)> = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| (sigmoid(z), i / num_classes, i % num_classes))
        .filter(|&(s, _, _)| s >= cfg.score_thresh)
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    cands.truncate(cfg.pre_nms_top_k);
    let dets: Vec<Detection> = cands
        .into_iter()
        .map(|(score, a, class)| {
            let d = [deltas[4 * a], deltas[4 * a + 1], deltas[4 * a + 2], deltas[4 * a + 3]];
            Detection {
                bbox: decode_boxes(&anchors.anchors[a], &d).clip(image_w, image_h),
                class,
                score,
            }
        })
        .collect();
    nms(&dets, cfg.nms_iou, cfg.score_thresh, cfg.max_dets)
}
