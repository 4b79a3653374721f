//! COCO-style average precision.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::Sample;
use crate::detection::{iou, Detection, GroundTruth};
use crate::error::Result;
use crate::model::Detector;

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
const RECALL_POINTS: usize = 101;
const MAX_DETS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    /// Mean over IoU thresholds 0.50:0.05:0.95 and classes with ground truth.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` for classes with no ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// 101-point interpolated AP of one class at one IoU threshold, or `None`
/// when the class has no ground truth.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class: usize, thresh: f64) -> Option<f64> {
    let npos: usize = gts.iter().map(|g| g.iter().filter(|t| t.class == class).count()).sum();
    if npos == 0 {
        return None;
    }
    let mut cands: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, d)| {
            let mut mine: Vec<&Detection> = d.iter().filter(|x| x.class == class).collect();
            mine.sort_by(|a, b| b.score.total_cmp(&a.score));
            mine.truncate(MAX_DETS);
            mine.into_iter().map(move |x| (img, x))
        })
        .collect();
    cands.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(cands.len());
    for (img, d) in &cands {
        let mut best = None;
        let mut best_iou = thresh.min(1.0 - 1e-10);
        for (j, t) in gts[*img].iter().enumerate() {
            if t.class != class || used[*img][j] {
                continue;
            }
            let o = iou(&d.bbox, &t.bbox);
            if o >= best_iou {
                best_iou = o;
                best = Some(j);
            }
        }
        if let Some(j) = best {
            used[*img][j] = true;
        }
        tp.push(best.is_some());
    }

    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0.0, 0.0);
    for &hit in &tp {
        if hit {
            ctp += 1.0;
        } else {
            cfp += 1.0;
        }
        precision.push(ctp / (ctp + cfp));
        recall.push(ctp / npos as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let total: f64 = (0..RECALL_POINTS)
        .map(|r| {
            let level = r as f64 / (RECALL_POINTS - 1) as f64;
            let i = recall.partition_point(|&x| x < level);
            precision.get(i).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / RECALL_POINTS as f64)
}

pub fn coco_metrics(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], num_classes: usize) -> Metrics {
    let table: Vec<Vec<Option<f64>>> = (0..num_classes)
        .map(|c| IOU_THRESHOLDS.iter().map(|&t| average_precision(dets, gts, c, t)).collect())
        .collect();
    let mean_at = |k: Option<usize>| {
        let vals: Vec<f64> = table
            .iter()
            .flat_map(|row| match k {
                Some(k) => vec![row[k]],
                None => row.clone(),
            })
            .flatten()
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    Metrics {
        ap: mean_at(None),
        ap50: mean_at(Some(0)),
        ap75: mean_at(Some(5)),
        per_class: table
            .iter()
            .map(|row| row[0].map(|_| row.iter().flatten().sum::<f64>() / row.len() as f64))
            .collect(),
    }
}

/// Runs the detector over `data` and scores it.
pub fn evaluate(det: &Detector, data: &[Sample]) -> Result<Metrics> {
    let dets = detect_all(det, data)?;
    let gts: Vec<Vec<GroundTruth>> = data.iter().map(|s| s.gts.clone()).collect();
    Ok(coco_metrics(&dets, &gts, det.cfg.num_classes))
}

/// Per-image detections; images are processed in parallel.
pub fn detect_all(det: &Detector, data: &[Sample]) -> Result<Vec<Vec<Detection>>> {
    data.par_iter()
        .map(|s| det.infer(&[&s.image]).map(|mut v| v.remove(0)))
        .collect()
}
