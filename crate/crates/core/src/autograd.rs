//! A tape of coarse-grained differentiable operations.
//!
//! Every node stores its forward value; `backward` walks the tape in reverse
//! and produces vector-Jacobian products for nodes that require gradients.
//! Parameter leaves reference the [`ParamStore`] instead of copying weights.

use std::rc::Rc;

use crate::error::Result;
use crate::params::{Init, ParamStore};
use crate::tensor::{gemm, MatView, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;
const LOG_CLAMP: f64 = 1e-12;

/// Upper bound on the log-scale box deltas before exponentiation.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

enum Op {
    Leaf,
    Param(usize),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    GatherRows { x: Var, idx: Rc<Vec<usize>>, row: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Add { a: Var, b: Var },
    AddBcast { x: Var, y: Var },
    Mul { a: Var, b: Var },
    MulScalar { x: Var, s: f64 },
    ScaleAxis { x: Var, s: Var, mid: usize, inner: usize },
    Exp { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Gelu { x: Var },
    Softmax { x: Var },
    L2Normalize { x: Var, inv_norm: Vec<f64> },
    Upsample2x { x: Var },
    AvgPool2x { x: Var },
    Sum { x: Var },
    FocalLoss { logits: Var, dlogits: Tensor },
    DecodeBoxes { deltas: Var, anchors: Rc<Vec<[f64; 4]>> },
    GiouLoss { pred: Var, dpred: Tensor },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

enum Store<'p> {
    Shared(&'p ParamStore),
    Building(&'p mut ParamStore),
}

impl Store<'_> {
    fn get(&self) -> &ParamStore {
        match self {
            Store::Shared(s) => s,
            Store::Building(s) => s,
        }
    }
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: Store<'p>,
}

/// Gradients of a scalar root with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// `(param index, gradient)` for every parameter leaf reached by backprop.
    /// A parameter used by several leaves appears once per leaf.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(node, p)| self.grads[node].as_ref().map(|g| (p, g)))
    }

    /// Adds parameter gradients into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (p, g) in self.params() {
            store.by_index_mut(p).grad.add_assign(g);
        }
    }
}

impl<'p> Graph<'p> {
    /// Graph whose parameter lookups are read-only.
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            store: Store::Shared(store),
        }
    }

    /// Graph that registers missing parameters (unless the store is frozen).
    pub fn building(store: &'p mut ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            store: Store::Building(store),
        }
    }

    pub fn params(&self) -> &ParamStore {
        self.store.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => &self.store.get().by_index(*i).value,
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding data; `requires_grad` makes it a differentiation target.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let idx = match &mut self.store {
            Store::Shared(s) => s.lookup(name, shape)?,
            Store::Building(s) => s.get_or_init(name, shape, init)?,
        };
        self.nodes.push(Node {
            value: None,
            op: Op::Param(idx),
            requires_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- linear algebra -----

    /// `x (.., K) @ w (K, N) + b (N)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let (k, n) = {
            let ws = self.shape(w);
            (ws[0], ws[1])
        };
        assert_eq!(*xs.last().unwrap(), k, "linear: input width {xs:?} vs weight {k}x{n}");
        let m = self.value(x).len() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(x).data(),
            MatView::row_major(m, k),
            self.value(w).data(),
            MatView::row_major(k, n),
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), n);
            for row in out.chunks_mut(n) {
                for (o, bb) in row.iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, &parents)
    }

    /// Batched matrix product over the leading axis with optional transposes
    /// of the stored operands.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm {sa:?} {sb:?}");
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm inner dims {sa:?} {sb:?}");
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let (asz, bsz) = (sa[1] * sa[2], sb[1] * sb[2]);
        for i in 0..batch {
            gemm(
                &ad[i * asz..(i + 1) * asz],
                view(sa[1], sa[2], ta),
                &bd[i * bsz..(i + 1) * bsz],
                view(sb[1], sb[2], tb),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(
            Tensor::new(vec![batch, m, n], out),
            Op::Bmm { a, b, ta, tb },
            &[a, b],
        )
    }

    // ----- layout -----

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let out = permute_tensor(self.value(x), perm);
        self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        self.push(out, Op::Reshape { x }, &[x])
    }

    /// Treats `x` as rows of `row` elements; output row `i` is input row
    /// `idx[i]`. The output has shape `out_shape`.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>, row: usize, out_shape: &[usize]) -> Var {
        let src = self.value(x).data();
        assert_eq!(src.len() % row, 0);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &r in idx.iter() {
            out.extend_from_slice(&src[r * row..(r + 1) * row]);
        }
        self.push(
            Tensor::new(out_shape.to_vec(), out),
            Op::GatherRows { x, idx, row },
            &[x],
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, size, inner) = split_axis(&shape, axis);
        assert!(start + len <= size, "narrow {start}+{len} > {size}");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push(Tensor::new(oshape, out), Op::Narrow { x, axis, start }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let (outer, _, inner) = split_axis(&first, axis);
        let sizes: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(s.len(), first.len());
                for (d, (a, b)) in s.iter().zip(&first).enumerate() {
                    assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
                }
                s[axis]
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    /// `x + y` where `y` is tiled over the leading elements of `x`.
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Var {
        let mut out = self.value(x).clone();
        let yd = self.value(y).data();
        assert_eq!(out.len() % yd.len(), 0, "add_bcast sizes");
        for chunk in out.data_mut().chunks_mut(yd.len()) {
            for (o, v) in chunk.iter_mut().zip(yd) {
                *o += v;
            }
        }
        self.push(out, Op::AddBcast { x, y }, &[x, y])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        self.push(out, Op::Mul { a, b }, &[a, b])
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::MulScalar { x, s }, &[x])
    }

    /// Views `x` as `(outer, mid, inner)` and scales slice `m` by `s[m]`.
    pub fn scale_axis(&mut self, x: Var, s: Var, mid: usize, inner: usize) -> Var {
        let sv = self.value(s).data().to_vec();
        assert_eq!(sv.len(), mid);
        let mut out = self.value(x).clone();
        assert_eq!(out.len() % (mid * inner), 0);
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= sv[(i / inner) % mid];
        }
        self.push(out, Op::ScaleAxis { x, s, mid, inner }, &[x, s])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.exp());
        self.push(out, Op::Exp { x }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v).0);
        self.push(out, Op::Gelu { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    // ----- normalization -----

    /// Layer normalization over the trailing axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let c = self.value(x).last_dim();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), c);
        let src = self.value(x).data();
        let rows = src.len() / c;
        let mut out = vec![0.0; src.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for (xr, yr) in src.chunks(c).zip(out.chunks_mut(c)) {
            let mu = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                yr[j] = (xr[j] - mu) * rs * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.last_dim();
        for row in out.data_mut().chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// Scales each trailing-axis row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.last_dim();
        let mut inv_norm = Vec::with_capacity(out.len() / c);
        for row in out.data_mut().chunks_mut(c) {
            let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() + L2_EPS).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
            inv_norm.push(inv);
        }
        self.push(out, Op::L2Normalize { x, inv_norm }, &[x])
    }

    // ----- spatial resampling on (N, H, W, C) -----

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * 4 * h * w * c];
        for b in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let si = ((b * h + y / 2) * w + xx / 2) * c;
                    let di = ((b * 2 * h + y) * 2 * w + xx) * c;
                    out[di..di + c].copy_from_slice(&src[si..si + c]);
                }
            }
        }
        self.push(
            Tensor::new(vec![n, 2 * h, 2 * w, c], out),
            Op::Upsample2x { x },
            &[x],
        )
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * ho * wo * c];
        for b in 0..n {
            for y in 0..ho {
                for xx in 0..wo {
                    let di = ((b * ho + y) * wo + xx) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let si = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        for j in 0..c {
                            out[di + j] += 0.25 * src[si + j];
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![n, ho, wo, c], out),
            Op::AvgPool2x { x },
            &[x],
        )
    }

    // ----- detection losses -----

    /// Sigmoid focal loss summed over `weights[anchor] * loss[anchor, class]`
    /// and divided by `norm`. `logits` and `targets` are `(anchors, classes)`.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: &[f64],
        weights: &[f64],
        alpha: f64,
        gamma: f64,
        norm: f64,
    ) -> Var {
        let z = self.value(logits);
        let classes = z.last_dim();
        assert_eq!(targets.len(), z.len());
        assert_eq!(weights.len() * classes, z.len());
        let mut total = 0.0;
        let mut grad = vec![0.0; z.len()];
        for (i, &zi) in z.data().iter().enumerate() {
            let wgt = weights[i / classes];
            if wgt == 0.0 {
                continue;
            }
            let (l, d) = focal_term(zi, targets[i], alpha, gamma);
            total += wgt * l;
            grad[i] = wgt * d / norm;
        }
        let dlogits = Tensor::new(z.shape().to_vec(), grad);
        self.push(
            Tensor::scalar(total / norm),
            Op::FocalLoss { logits, dlogits },
            &[logits],
        )
    }

    /// Applies center/size deltas `(n, 4)` to corner-form anchors.
    pub fn decode_boxes(&mut self, deltas: Var, anchors: Rc<Vec<[f64; 4]>>) -> Var {
        let d = self.value(deltas).data();
        assert_eq!(d.len(), anchors.len() * 4);
        let mut out = Vec::with_capacity(d.len());
        for (dl, a) in d.chunks(4).zip(anchors.iter()) {
            out.extend_from_slice(&decode_one(a, dl));
        }
        self.push(
            Tensor::new(vec![anchors.len(), 4], out),
            Op::DecodeBoxes { deltas, anchors },
            &[deltas],
        )
    }

    /// `sum_i (1 - GIoU(pred_i, gt_i)) / norm` for corner-form boxes.
    pub fn giou_loss(&mut self, pred: Var, gt: &[[f64; 4]], norm: f64) -> Var {
        let p = self.value(pred).data();
        assert_eq!(p.len(), gt.len() * 4);
        let mut total = 0.0;
        let mut grad = vec![0.0; p.len()];
        for (i, (pb, g)) in p.chunks(4).zip(gt).enumerate() {
            let pb = [pb[0], pb[1], pb[2], pb[3]];
            let (v, dv) = giou_with_grad(&pb, g);
            total += 1.0 - v;
            for j in 0..4 {
                grad[i * 4 + j] = -dv[j] / norm;
            }
        }
        let dpred = Tensor::new(vec![gt.len(), 4], grad);
        self.push(
            Tensor::scalar(total / norm),
            Op::GiouLoss { pred, dpred },
            &[pred],
        )
    }

    // ----- backward -----

    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![1.0]));
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((i, p)),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn backprop_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => g.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (k, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                let m = gy.len() / n;
                if want(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(
                        gy.data(),
                        MatView::row_major(m, n),
                        self.value(*w).data(),
                        MatView::transposed(k, n),
                        0.0,
                        &mut dx,
                    );
                    acc(*x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
                if want(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(
                        self.value(*x).data(),
                        MatView::transposed(m, k),
                        gy.data(),
                        MatView::row_major(m, n),
                        0.0,
                        &mut dw,
                    );
                    acc(*w, Tensor::new(vec![k, n], dw));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; n];
                    for row in gy.data().chunks(n) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    acc(*b, Tensor::new(vec![n], db));
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let batch = sa[0];
                let (m, n) = (gy.shape()[1], gy.shape()[2]);
                let (asz, bsz) = (sa[1] * sa[2], sb[1] * sb[2]);
                let (ad, bd, gd) = (self.value(*a).data(), self.value(*b).data(), gy.data());
                if want(*a) {
                    let mut da = vec![0.0; batch * asz];
                    for bi in 0..batch {
                        let g = &gd[bi * m * n..(bi + 1) * m * n];
                        let bm = &bd[bi * bsz..(bi + 1) * bsz];
                        let out = &mut da[bi * asz..(bi + 1) * asz];
                        if !ta {
                            gemm(g, MatView::row_major(m, n), bm, view(sb[1], sb[2], !tb), 0.0, out);
                        } else {
                            gemm(bm, view(sb[1], sb[2], *tb), g, MatView::transposed(m, n), 0.0, out);
                        }
                    }
                    acc(*a, Tensor::new(sa.clone(), da));
                }
                if want(*b) {
                    let mut db = vec![0.0; batch * bsz];
                    for bi in 0..batch {
                        let g = &gd[bi * m * n..(bi + 1) * m * n];
                        let am = &ad[bi * asz..(bi + 1) * asz];
                        let out = &mut db[bi * bsz..(bi + 1) * bsz];
                        if !tb {
                            gemm(am, view(sa[1], sa[2], !ta), g, MatView::row_major(m, n), 0.0, out);
                        } else {
                            gemm(g, MatView::transposed(m, n), am, view(sa[1], sa[2], *ta), 0.0, out);
                        }
                    }
                    acc(*b, Tensor::new(sb, db));
                }
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*x, permute_tensor(gy, &inv));
            }
            Op::Reshape { x } => {
                acc(*x, gy.clone().reshaped(self.shape(*x)));
            }
            Op::GatherRows { x, idx, row } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..*row {
                        d[r * row + j] += gy.data()[k * row + j];
                    }
                }
                acc(*x, dx);
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, size, inner) = split_axis(&shape, *axis);
                let len = gy.shape()[*axis];
                let mut dx = Tensor::zeros(&shape);
                for o in 0..outer {
                    let base = (o * size + start) * inner;
                    dx.data_mut()[base..base + len * inner]
                        .copy_from_slice(&gy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(gy.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let sz = self.shape(p)[*axis];
                    if want(p) {
                        let mut d = Vec::with_capacity(outer * sz * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gy.data()[base..base + sz * inner]);
                        }
                        acc(p, Tensor::new(self.shape(p).to_vec(), d));
                    }
                    offset += sz;
                }
            }
            Op::Add { a, b } => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::AddBcast { x, y } => {
                acc(*x, gy.clone());
                if want(*y) {
                    let mut dy = Tensor::zeros(self.shape(*y));
                    let n = dy.len();
                    for chunk in gy.data().chunks(n) {
                        for (d, g) in dy.data_mut().iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                    acc(*y, dy);
                }
            }
            Op::Mul { a, b } => {
                let prod = |t: &Tensor| {
                    let mut out = gy.clone();
                    for (o, v) in out.data_mut().iter_mut().zip(t.data()) {
                        *o *= v;
                    }
                    out
                };
                if want(*a) {
                    acc(*a, prod(self.value(*b)));
                }
                if want(*b) {
                    acc(*b, prod(self.value(*a)));
                }
            }
            Op::MulScalar { x, s } => {
                let mut d = gy.clone();
                d.data_mut().iter_mut().for_each(|v| *v *= s);
                acc(*x, d);
            }
            Op::ScaleAxis { x, s, mid, inner } => {
                let sv = self.value(*s).data();
                let xv = self.value(*x).data();
                let mut dx = gy.clone();
                let mut ds = vec![0.0; *mid];
                for (k, d) in dx.data_mut().iter_mut().enumerate() {
                    let m = (k / inner) % mid;
                    ds[m] += *d * xv[k];
                    *d *= sv[m];
                }
                acc(*x, dx);
                acc(*s, Tensor::new(vec![*mid], ds));
            }
            Op::Exp { x } => {
                let y = self.nodes[i].value.as_ref().unwrap();
                let mut d = gy.clone();
                for (o, v) in d.data_mut().iter_mut().zip(y.data()) {
                    *o *= v;
                }
                acc(*x, d);
            }
            Op::Gelu { x } => {
                let mut d = gy.clone();
                for (o, v) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *o *= gelu(*v).1;
                }
                acc(*x, d);
            }
            Op::Sum { x } => {
                acc(*x, Tensor::full(self.shape(*x), gy.item()));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let g = self.value(*gamma).data();
                let c = g.len();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for r in 0..xv.len() / c {
                    let (xr, gr) = (&xv[r * c..(r + 1) * c], &gy.data()[r * c..(r + 1) * c]);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        xhat[j] = (xr[j] - mean[r]) * rstd[r];
                        dxhat[j] = gr[j] * g[j];
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        dx[r * c + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(*x, Tensor::new(self.shape(*x).to_vec(), dx));
                acc(*gamma, Tensor::new(vec![c], dg));
                acc(*beta, Tensor::new(vec![c], db));
            }
            Op::Softmax { x } => {
                let y = self.nodes[i].value.as_ref().unwrap();
                let c = y.last_dim();
                let mut dx = gy.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (d, yv) in dr.iter_mut().zip(yr) {
                        *d = yv * (*d - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::L2Normalize { x, inv_norm } => {
                let y = self.nodes[i].value.as_ref().unwrap();
                let c = y.last_dim();
                let mut dx = gy.clone();
                for ((dr, yr), inv) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(inv_norm) {
                    let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (d, yv) in dr.iter_mut().zip(yr) {
                        *d = (*d - yv * dot) * inv;
                    }
                }
                acc(*x, dx);
            }
            Op::Upsample2x { x } => {
                let s = self.shape(*x).to_vec();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let mut dx = vec![0.0; n * h * w * c];
                let g = gy.data();
                for b in 0..n {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let di = ((b * h + y / 2) * w + xx / 2) * c;
                            let si = ((b * 2 * h + y) * 2 * w + xx) * c;
                            for j in 0..c {
                                dx[di + j] += g[si + j];
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(s, dx));
            }
            Op::AvgPool2x { x } => {
                let s = self.shape(*x).to_vec();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; n * h * w * c];
                let g = gy.data();
                for b in 0..n {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let si = ((b * ho + y) * wo + xx) * c;
                            for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let di = ((b * h + 2 * y + dy) * w + 2 * xx + dxo) * c;
                                for j in 0..c {
                                    dx[di + j] += 0.25 * g[si + j];
                                }
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(s, dx));
            }
            Op::FocalLoss { logits, dlogits } => {
                let mut d = dlogits.clone();
                d.data_mut().iter_mut().for_each(|v| *v *= gy.item());
                acc(*logits, d);
            }
            Op::DecodeBoxes { deltas, anchors } => {
                let dv = self.value(*deltas).data();
                let g = gy.data();
                let mut dd = vec![0.0; dv.len()];
                for (k, a) in anchors.iter().enumerate() {
                    let (aw, ah) = (a[2] - a[0], a[3] - a[1]);
                    let (gx1, gy1, gx2, gy2) = (g[4 * k], g[4 * k + 1], g[4 * k + 2], g[4 * k + 3]);
                    // d/dcx and d/dcy
                    dd[4 * k] = (gx1 + gx2) * aw;
                    dd[4 * k + 1] = (gy1 + gy2) * ah;
                    let lw = dv[4 * k + 2];
                    let lh = dv[4 * k + 3];
                    if lw < MAX_LOG_SCALE {
                        let w = aw * lw.exp();
                        dd[4 * k + 2] = 0.5 * (gx2 - gx1) * w;
                    }
                    if lh < MAX_LOG_SCALE {
                        let h = ah * lh.exp();
                        dd[4 * k + 3] = 0.5 * (gy2 - gy1) * h;
                    }
                }
                acc(*deltas, Tensor::new(self.shape(*deltas).to_vec(), dd));
            }
            Op::GiouLoss { pred, dpred } => {
                let mut d = dpred.clone();
                d.data_mut().iter_mut().for_each(|v| *v *= gy.item());
                acc(*pred, d);
            }
        }
    }
}

fn view(rows: usize, cols: usize, transpose: bool) -> MatView {
    if transpose {
        MatView::transposed(rows, cols)
    } else {
        MatView::row_major(rows, cols)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    assert_eq!(perm.len(), s.len());
    let nd = s.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * s[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return Tensor::new(out_shape, out);
    }
    // innermost axis copied in a tight loop
    let last = nd - 1;
    let (n_last, st_last) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        for j in 0..n_last {
            out.push(src[base + j * st_last]);
        }
        let mut d = last;
        loop {
            if d == 0 {
                return Tensor::new(out_shape, out);
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Tanh-approximated GELU and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = K * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid_pair(z: f64) -> (f64, f64) {
    // (p, 1 - p) without cancellation
    if z >= 0.0 {
        let e = (-z).exp();
        (1.0 / (1.0 + e), e / (1.0 + e))
    } else {
        let e = z.exp();
        (e / (1.0 + e), 1.0 / (1.0 + e))
    }
}

/// Focal loss of one logit and its derivative with respect to the logit.
pub(crate) fn focal_term(z: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let (p, q) = sigmoid_pair(z);
    if target >= 0.5 {
        let (lp, live) = if p > LOG_CLAMP { (p.ln(), 1.0) } else { (LOG_CLAMP.ln(), 0.0) };
        let qg = q.powf(gamma);
        let loss = -alpha * qg * lp;
        let d = -alpha * (-gamma * p * qg * lp + qg * q * live);
        (loss, d)
    } else {
        let (lq, live) = if q > LOG_CLAMP { (q.ln(), 1.0) } else { (LOG_CLAMP.ln(), 0.0) };
        let pg = p.powf(gamma);
        let loss = -(1.0 - alpha) * pg * lq;
        let d = -(1.0 - alpha) * (gamma * pg * q * lq - pg * p * live);
        (loss, d)
    }
}

pub(crate) fn decode_one(a: &[f64; 4], d: &[f64]) -> [f64; 4] {
    let (aw, ah) = (a[2] - a[0], a[3] - a[1]);
    let (ax, ay) = (a[0] + 0.5 * aw, a[1] + 0.5 * ah);
    let cx = ax + d[0] * aw;
    let cy = ay + d[1] * ah;
    let w = aw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ah * d[3].min(MAX_LOG_SCALE).exp();
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

/// GIoU of corner-form boxes and its gradient with respect to `a`.
pub(crate) fn giou_with_grad(a: &[f64; 4], b: &[f64; 4]) -> (f64, [f64; 4]) {
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let iw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih = a[3].min(b[3]) - a[1].max(b[1]);
    let (iw_c, ih_c) = (iw.max(0.0), ih.max(0.0));
    let inter = iw_c * ih_c;
    let union = area_a + area_b - inter;
    let cw = a[2].max(b[2]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[1].min(b[1]);
    let enclose = cw.max(0.0) * ch.max(0.0);
    if union <= 0.0 || enclose <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let iou = inter / union;
    let giou = iou - (enclose - union) / enclose;

    // partials of giou with respect to inter, area_a and enclose
    let d_inter = 1.0 / union + inter / (union * union) - 1.0 / enclose;
    let d_area = -inter / (union * union) + 1.0 / enclose;
    let d_enc = -union / (enclose * enclose);

    let (w, h) = (a[2] - a[0], a[3] - a[1]);
    let mut g = [0.0; 4];
    // area of a
    if w > 0.0 && h > 0.0 {
        g[0] -= d_area * h;
        g[2] += d_area * h;
        g[1] -= d_area * w;
        g[3] += d_area * w;
    }
    // intersection
    if iw > 0.0 && ih > 0.0 {
        if a[0] > b[0] {
            g[0] -= d_inter * ih;
        }
        if a[2] < b[2] {
            g[2] += d_inter * ih;
        }
        if a[1] > b[1] {
            g[1] -= d_inter * iw;
        }
        if a[3] < b[3] {
            g[3] += d_inter * iw;
        }
    }
    // enclosing box
    if a[0] < b[0] {
        g[0] -= d_enc * ch;
    }
    if a[2] > b[2] {
        g[2] += d_enc * ch;
    }
    if a[1] < b[1] {
        g[1] -= d_enc * cw;
    }
    if a[3] > b[3] {
        g[3] += d_enc * cw;
    }
    (giou, g)
}
