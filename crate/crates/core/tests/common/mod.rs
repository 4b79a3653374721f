//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use dfft_core::detection::{BBox, Detection};
use dfft_core::{Graph, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rand_vec(rng, n, scale))
}

/// `x (rows, cin) @ w (cin, cout) + b` by explicit loops.
pub fn dense_oracle(x: &[f64], rows: usize, cin: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cout];
    for r in 0..rows {
        for o in 0..cout {
            let mut acc = b[o];
            for i in 0..cin {
                acc += x[r * cin + i] * w[i * cout + o];
            }
            out[r * cout + o] = acc;
        }
    }
    out
}

pub fn layer_norm_oracle(x: &[f64], c: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    x.chunks(c)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(move |(i, v)| (v - mean) * inv * gamma[i] + beta[i])
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn gelu_oracle(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax_oracle(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(name).unwrap().value.data().to_vec()
}

pub fn set_param(store: &mut ParamStore, name: &str, data: Vec<f64>) {
    let p = store.get_mut(name).unwrap();
    assert_eq!(p.value.len(), data.len(), "{name}");
    p.value.data_mut().copy_from_slice(&data);
}

/// Builds the graph once to create its parameters, then freezes the store
/// and fills it with non-trivial random values.
pub fn build_params<F>(input: &Tensor, seed: u64, build: &F) -> ParamStore
where
    F: Fn(&mut Graph, Tensor) -> Result<(Var, Var)>,
{
    let mut store = ParamStore::new(seed);
    {
        let mut g = Graph::building(&mut store);
        build(&mut g, input.clone()).unwrap();
    }
    store.freeze();
    store.randomize(seed + 1, 0.3);
    store
}

pub fn forward_value<F>(store: &ParamStore, input: &Tensor, build: &F) -> Tensor
where
    F: Fn(&mut Graph, Tensor) -> Result<(Var, Var)>,
{
    let mut g = Graph::new(store);
    let (_, y) = build(&mut g, input.clone()).unwrap();
    g.value(y).clone()
}

/// Scalar probe `sum(y * r)` used to check gradients.
fn probe<F>(store: &ParamStore, input: &Tensor, r: &Tensor, build: &F) -> f64
where
    F: Fn(&mut Graph, Tensor) -> Result<(Var, Var)>,
{
    let y = forward_value(store, input, build);
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

pub const FD_STEP: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
pub const FD_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Central-difference check of input and parameter gradients on `probes`
/// randomly chosen coordinates of each. Returns the largest relative error.
pub fn fd_check<F>(store: &mut ParamStore, input: &Tensor, build: F, probes: usize, seed: u64) -> f64
where
    F: Fn(&mut Graph, Tensor) -> Result<(Var, Var)>,
{
    let mut r = rng(seed);
    let y0 = forward_value(store, input, &build);
    let weights = rand_tensor(&mut r, y0.shape(), 1.0);

    let (gin, gparams) = {
        let mut g = Graph::new(store);
        let (x, y) = build(&mut g, input.clone()).unwrap();
        let w = g.constant(weights.clone());
        let prod = g.mul(y, w);
        let s = g.sum(prod);
        let grads = g.backward(s);
        let gin = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let gp: Vec<(usize, Tensor)> = grads.params().map(|(i, t)| (i, t.clone())).collect();
        (gin, gp)
    };

    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = r.random_range(0..input.len());
        let mut plus = input.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = input.clone();
        minus.data_mut()[i] -= FD_STEP;
        let num = (probe(store, &plus, &weights, &build) - probe(store, &minus, &weights, &build)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(gin.data()[i], num));
    }
    let analytic = |idx: usize| gparams.iter().find(|(i, _)| *i == idx).map(|(_, t)| t.clone());
    for pi in 0..store.len() {
        let n = store.by_index(pi).value.len();
        let grad = analytic(pi).unwrap_or_else(|| Tensor::zeros(store.by_index(pi).value.shape()));
        for _ in 0..probes.min(n) {
            let j = r.random_range(0..n);
            let orig = store.by_index(pi).value.data()[j];
            store.by_index_mut(pi).value.data_mut()[j] = orig + FD_STEP;
            let fp = probe(store, input, &weights, &build);
            store.by_index_mut(pi).value.data_mut()[j] = orig - FD_STEP;
            let fm = probe(store, input, &weights, &build);
            store.by_index_mut(pi).value.data_mut()[j] = orig;
            let num = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.data()[j], num));
        }
    }
    worst
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = rng.random::<f64>() * extent;
    let y1 = rng.random::<f64>() * extent;
    let w = rng.random::<f64>() * extent * 0.5 + 1e-3;
    let h = rng.random::<f64>() * extent * 0.5 + 1e-3;
    BBox::new(x1, y1, x1 + w, y1 + h)
}

pub fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let area = |x: &BBox| (x.x2 - x.x1).max(0.0) * (x.y2 - x.y1).max(0.0);
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let u = area(a) + area(b) - iw * ih;
    if u > 0.0 {
        iw * ih / u
    } else {
        0.0
    }
}

/// Assigner by global greedy selection over all (gt, anchor) pairs in order
/// of centre distance, corner L1 distance, gt index, anchor corners and
/// anchor index. Returns `(anchor, gt)` pairs sorted by anchor.
pub fn brute_force_match(anchors: &[BBox], gts: &[BBox], k: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(anchors.len() * gts.len());
    for (gi, g) in gts.iter().enumerate() {
        let (gx, gy) = ((g.x1 + g.x2) / 2.0, (g.y1 + g.y2) / 2.0);
        for (ai, a) in anchors.iter().enumerate() {
            let (ax, ay) = ((a.x1 + a.x2) / 2.0, (a.y1 + a.y2) / 2.0);
            let d = ((ax - gx).powi(2) + (ay - gy).powi(2)).sqrt();
            let l1 = (a.x1 - g.x1).abs() + (a.y1 - g.y1).abs() + (a.x2 - g.x2).abs() + (a.y2 - g.y2).abs();
            pairs.push((d, l1, gi, [a.x1, a.y1, a.x2, a.y2], ai));
        }
    }
    pairs.sort_by(|p, q| {
        p.0.total_cmp(&q.0)
            .then(p.1.total_cmp(&q.1))
            .then(p.2.cmp(&q.2))
            .then(p.3[0].total_cmp(&q.3[0]))
            .then(p.3[1].total_cmp(&q.3[1]))
            .then(p.3[2].total_cmp(&q.3[2]))
            .then(p.3[3].total_cmp(&q.3[3]))
            .then(p.4.cmp(&q.4))
    });
    let mut taken = vec![false; anchors.len()];
    let mut need = vec![k; gts.len()];
    let mut out = Vec::new();
    for (_, _, gi, _, ai) in pairs {
        if need[gi] > 0 && !taken[ai] {
            taken[ai] = true;
            need[gi] -= 1;
            out.push((ai, gi));
        }
    }
    out.sort();
    out
}

/// Greedy NMS from a precomputed IoU matrix.
pub fn nms_oracle(dets: &[Detection], thresh: f64, score_thresh: f64, max_dets: usize) -> Vec<Detection> {
    let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= score_thresh).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let n = idx.len();
    let iou: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| idx.iter().map(|&j| iou_oracle(&dets[i].bbox, &dets[j].bbox)).collect())
        .collect();
    let mut keep = vec![false; n];
    for a in 0..n {
        keep[a] = !(0..a).any(|b| keep[b] && dets[idx[b]].class == dets[idx[a]].class && iou[a][b] > thresh);
    }
    idx.iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&i, _)| dets[i])
        .take(max_dets)
        .collect()
}
