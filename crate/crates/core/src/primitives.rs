//! Differentiable building blocks over `(batch, height, width, channels)`
//! feature maps: patch embedding, patch merging, resampling, the pre-norm
//! FFN, shifted-window self-attention and the channel-wise (cross-covariance)
//! attention blocks in their global and two-group forms.
//!
//! Parameters are addressed by a dotted name prefix passed to every op, e.g.
//! `backbone.stage1.sa0`. Weight matrices are stored `(in, out)`.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::Init;
use crate::tensor::Tensor;

pub const PATCH_SIZE: usize = 8;
const INIT_STD: f64 = 0.02;
const MASK_VALUE: f64 = -1e9;

/// A feature map living in a [`Graph`], tagged with its stride in input pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: usize,
}

impl FeatureMap {
    /// Wraps an `(N, H, W, C)` tensor as a graph leaf.
    pub fn input(g: &mut Graph, data: Tensor, stride: usize, requires_grad: bool) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("feature map needs 4 non-zero axes, got {s:?}")));
        }
        if !data.all_finite() {
            return Err(Error::shape("feature map contains non-finite values"));
        }
        if stride == 0 {
            return Err(Error::shape("stride must be positive"));
        }
        let (batch, height, width, channels) = (s[0], s[1], s[2], s[3]);
        let var = g.input(data, requires_grad);
        Ok(Self {
            var,
            batch,
            height,
            width,
            channels,
            stride,
        })
    }

    pub(crate) fn wrap(g: &Graph, var: Var, stride: usize) -> Self {
        let s = g.shape(var);
        debug_assert_eq!(s.len(), 4);
        Self {
            var,
            batch: s[0],
            height: s[1],
            width: s[2],
            channels: s[3],
            stride,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.height, self.width, self.channels]
    }

    pub fn cells(&self) -> usize {
        self.batch * self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    /// Window side `M` for shifted-window attention.
    pub window_size: usize,
    /// Window side the relative-position table is sized for; windows clamped
    /// below `window_size` index the central part of the same table.
    pub table_window: usize,
    /// Hidden-width multiplier of the FFN.
    pub ffn_ratio: usize,
}

impl AttentionConfig {
    pub fn new(num_heads: usize, window_size: usize, ffn_ratio: usize) -> Self {
        Self {
            num_heads,
            window_size,
            table_window: window_size,
            ffn_ratio,
        }
    }

    /// Same config with the effective window reduced to `window`.
    pub fn with_window(self, window: usize) -> Self {
        Self {
            window_size: window,
            table_window: self.table_window.max(window),
            ..self
        }
    }
}

fn check_divisible(op: &'static str, axis: &'static str, size: usize, divisor: usize) -> Result<()> {
    if divisor == 0 || size % divisor != 0 {
        return Err(Error::Dimension {
            op,
            axis,
            size,
            divisor,
        });
    }
    Ok(())
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || channels % heads != 0 {
        return Err(Error::config(format!(
            "{channels} channels are not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// `x @ W + b` with `W: (c_in, c_out)` registered under `{name}.weight`.
pub(crate) fn dense(g: &mut Graph, x: Var, c_in: usize, c_out: usize, name: &str) -> Result<Var> {
    let w = g.param(&format!("{name}.weight"), &[c_in, c_out], Init::TruncNormal(INIT_STD))?;
    let b = g.param(&format!("{name}.bias"), &[c_out], Init::Zeros)?;
    Ok(g.linear(x, w, Some(b)))
}

pub(crate) fn norm(g: &mut Graph, x: Var, c: usize, name: &str) -> Result<Var> {
    let gamma = g.param(&format!("{name}.gamma"), &[c], Init::Const(1.0))?;
    let beta = g.param(&format!("{name}.beta"), &[c], Init::Zeros)?;
    Ok(g.layer_norm(x, gamma, beta))
}

/// Rearranges `p x p` spatial blocks into the channel axis, flattening each
/// block in `(dy, dx, channel)` order.
fn space_to_depth(g: &mut Graph, x: &FeatureMap, p: usize) -> Var {
    let [n, h, w, c] = x.dims();
    let v = g.reshape(x.var, &[n, h / p, p, w / p, p, c]);
    let v = g.permute(v, &[0, 1, 3, 2, 4, 5]);
    g.reshape(v, &[n, h / p, w / p, p * p * c])
}

/// Non-overlapping 8x8 patches, each linearly projected to `c1` channels.
pub fn patch_embed(g: &mut Graph, image: &FeatureMap, c1: usize, name: &str) -> Result<FeatureMap> {
    if image.channels != 3 {
        return Err(Error::shape(format!("image must have 3 channels, got {}", image.channels)));
    }
    check_divisible("patch_embed", "height", image.height, PATCH_SIZE)?;
    check_divisible("patch_embed", "width", image.width, PATCH_SIZE)?;
    let patches = space_to_depth(g, image, PATCH_SIZE);
    let y = dense(g, patches, PATCH_SIZE * PATCH_SIZE * 3, c1, &format!("{name}.proj"))?;
    Ok(FeatureMap::wrap(g, y, image.stride * PATCH_SIZE))
}

/// Concatenates each 2x2 neighbourhood (`4 * C` values) and projects it to
/// `c_out` channels, halving the resolution.
pub fn patch_merge(g: &mut Graph, x: &FeatureMap, c_out: usize, name: &str) -> Result<FeatureMap> {
    check_divisible("patch_merge", "height", x.height, 2)?;
    check_divisible("patch_merge", "width", x.width, 2)?;
    let merged = space_to_depth(g, x, 2);
    let y = dense(g, merged, 4 * x.channels, c_out, &format!("{name}.reduction"))?;
    Ok(FeatureMap::wrap(g, y, x.stride * 2))
}

/// Nearest-neighbour 2x upsampling with a 1x1 projection to `c_out`.
///
/// The projection is applied before replication; both orders give the same
/// result because the projection acts per cell.
pub fn upsample2x(g: &mut Graph, x: &FeatureMap, c_out: usize, name: &str) -> Result<FeatureMap> {
    if x.stride < 2 || x.stride % 2 != 0 {
        return Err(Error::shape(format!("cannot upsample a stride-{} map", x.stride)));
    }
    let p = dense(g, x.var, x.channels, c_out, &format!("{name}.proj"))?;
    let y = g.upsample2x(p);
    Ok(FeatureMap::wrap(g, y, x.stride / 2))
}

/// 2x2 mean pooling followed by a 1x1 projection to `c_out`.
pub fn downsample2x(g: &mut Graph, x: &FeatureMap, c_out: usize, name: &str) -> Result<FeatureMap> {
    check_divisible("downsample2x", "height", x.height, 2)?;
    check_divisible("downsample2x", "width", x.width, 2)?;
    let pooled = g.avg_pool2x(x.var);
    let y = dense(g, pooled, x.channels, c_out, &format!("{name}.proj"))?;
    Ok(FeatureMap::wrap(g, y, x.stride * 2))
}

/// Pre-norm residual MLP: `x + W2 gelu(W1 norm(x))`.
pub fn ffn(g: &mut Graph, x: &FeatureMap, ratio: usize, name: &str) -> Result<FeatureMap> {
    let y = ffn_var(g, x.var, x.channels, ratio, name)?;
    Ok(FeatureMap::wrap(g, y, x.stride))
}

fn ffn_var(g: &mut Graph, x: Var, c: usize, ratio: usize, name: &str) -> Result<Var> {
    if ratio == 0 {
        return Err(Error::config("ffn ratio must be positive"));
    }
    let xn = norm(g, x, c, &format!("{name}.norm"))?;
    let h = dense(g, xn, c, ratio * c, &format!("{name}.fc1"))?;
    let h = g.gelu(h);
    let y = dense(g, h, ratio * c, c, &format!("{name}.fc2"))?;
    Ok(g.add(x, y))
}

/// Row permutation taking `(N, H, W)` cells into window-major order after a
/// cyclic shift by `shift` in both axes, plus its inverse.
pub(crate) fn window_indices(n: usize, h: usize, w: usize, m: usize, shift: usize) -> (Vec<usize>, Vec<usize>) {
    let (nwh, nww) = (h / m, w / m);
    let t = m * m;
    let mut fwd = Vec::with_capacity(n * h * w);
    let mut inv = vec![0; n * h * w];
    for b in 0..n {
        for wy in 0..nwh {
            for wx in 0..nww {
                for iy in 0..m {
                    for ix in 0..m {
                        let y = (wy * m + iy + shift) % h;
                        let x = (wx * m + ix + shift) % w;
                        let src = (b * h + y) * w + x;
                        inv[src] = fwd.len();
                        fwd.push(src);
                    }
                }
            }
        }
    }
    debug_assert_eq!(fwd.len(), n * nwh * nww * t);
    (fwd, inv)
}

/// Relative-position table row for every ordered token pair of an `m x m`
/// window, for a table covering offsets of a `table x table` window.
pub(crate) fn relative_index(m: usize, table: usize) -> Vec<usize> {
    let side = 2 * table - 1;
    let mut idx = Vec::with_capacity(m * m * m * m);
    for i in 0..m * m {
        let (iy, ix) = (i / m, i % m);
        for j in 0..m * m {
            let (jy, jx) = (j / m, j % m);
            let dy = iy + table - 1 - jy;
            let dx = ix + table - 1 - jx;
            idx.push(dy * side + dx);
        }
    }
    idx
}

/// Additive mask `(windows, heads, T, T)` blocking attention between tokens
/// that were not adjacent before the cyclic shift.
pub(crate) fn shift_mask(h: usize, w: usize, m: usize, shift: usize, heads: usize) -> Tensor {
    let region = |p: usize, size: usize| {
        if p < size - m {
            0
        } else if p < size - shift {
            1
        } else {
            2
        }
    };
    let (nwh, nww) = (h / m, w / m);
    let t = m * m;
    let mut data = Vec::with_capacity(nwh * nww * heads * t * t);
    for wy in 0..nwh {
        for wx in 0..nww {
            let labels: Vec<usize> = (0..t)
                .map(|k| region(wy * m + k / m, h) * 3 + region(wx * m + k % m, w))
                .collect();
            for _ in 0..heads {
                for i in 0..t {
                    for j in 0..t {
                        data.push(if labels[i] == labels[j] { 0.0 } else { MASK_VALUE });
                    }
                }
            }
        }
    }
    Tensor::new(vec![nwh * nww, heads, t, t], data)
}

/// Window multi-head self-attention block (attention sub-block then FFN),
/// optionally on windows shifted by `M / 2`.
pub fn w_msa(g: &mut Graph, x: &FeatureMap, cfg: &AttentionConfig, shifted: bool, name: &str) -> Result<FeatureMap> {
    let m = cfg.window_size;
    let [n, h, w, c] = x.dims();
    if m == 0 || m > h.min(w) {
        return Err(Error::config(format!("window size {m} exceeds the {h}x{w} map")));
    }
    if cfg.table_window < m {
        return Err(Error::config("relative position table smaller than the window"));
    }
    check_divisible("w_msa", "height", h, m)?;
    check_divisible("w_msa", "width", w, m)?;
    check_heads(c, cfg.num_heads)?;
    let heads = cfg.num_heads;
    let d = c / heads;
    let t = m * m;
    let windows = (h / m) * (w / m);
    let batch_windows = n * windows;
    let shift = if shifted { m / 2 } else { 0 };

    let xn = norm(g, x.var, c, &format!("{name}.norm"))?;
    let (fwd, inv) = window_indices(n, h, w, m, shift);
    let win = g.gather_rows(xn, Rc::new(fwd), c, &[batch_windows, t, c]);

    let qkv = dense(g, win, c, 3 * c, &format!("{name}.qkv"))?;
    let qkv = g.reshape(qkv, &[batch_windows, t, 3, heads, d]);
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]);
    let qkv = g.reshape(qkv, &[3, batch_windows * heads, t, d]);
    let mut qkv_parts = [qkv; 3];
    for (i, part) in qkv_parts.iter_mut().enumerate() {
        let v = g.narrow(qkv, 0, i, 1);
        *part = g.reshape(v, &[batch_windows * heads, t, d]);
    }
    let [q, k, v] = qkv_parts;

    let scores = g.bmm(q, k, false, true);
    let scores = g.mul_scalar(scores, 1.0 / (d as f64).sqrt());

    let side = 2 * cfg.table_window - 1;
    let table = g.param(&format!("{name}.rel_bias"), &[side * side, heads], Init::TruncNormal(INIT_STD))?;
    let bias = g.gather_rows(table, Rc::new(relative_index(m, cfg.table_window)), heads, &[t * t, heads]);
    let bias = g.permute(bias, &[1, 0]);
    let mut scores = g.add_bcast(scores, bias);
    if shift > 0 {
        let mask = g.constant(shift_mask(h, w, m, shift, heads));
        scores = g.add_bcast(scores, mask);
    }
    let attn = g.softmax(scores);
    let out = g.bmm(attn, v, false, false);
    let out = g.reshape(out, &[batch_windows, heads, t, d]);
    let out = g.permute(out, &[0, 2, 1, 3]);
    let out = g.reshape(out, &[batch_windows * t, c]);
    let out = dense(g, out, c, c, &format!("{name}.proj"))?;
    let out = g.gather_rows(out, Rc::new(inv), c, &[n, h, w, c]);
    let y = g.add(x.var, out);
    let y = ffn_var(g, y, c, cfg.ffn_ratio, &format!("{name}.ffn"))?;
    Ok(FeatureMap::wrap(g, y, x.stride))
}

/// Cross-covariance attention core on normalized input `xn (N, H, W, C)`:
/// per head, attention over the `d x d` matrix of L2-normalized query/key
/// columns scaled by a learned temperature. Returns the head-concatenated
/// output before the output projection.
fn xca_core(g: &mut Graph, xn: Var, dims: [usize; 4], heads: usize, name: &str) -> Result<Var> {
    let [n, h, w, c] = dims;
    let t = h * w;
    let d = c / heads;
    let qkv = dense(g, xn, c, 3 * c, &format!("{name}.qkv"))?;
    let qkv = g.reshape(qkv, &[n, t, 3, heads, d]);
    let qkv = g.permute(qkv, &[2, 0, 3, 4, 1]);
    let qkv = g.reshape(qkv, &[3, n * heads, d, t]);
    let mut parts = [qkv; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let v = g.narrow(qkv, 0, i, 1);
        *part = g.reshape(v, &[n * heads, d, t]);
    }
    let [q, k, v] = parts;
    let q = g.l2_normalize(q);
    let k = g.l2_normalize(k);
    let attn = g.bmm(q, k, false, true);
    let log_tau = g.param(&format!("{name}.log_tau"), &[heads], Init::Zeros)?;
    let tau = g.exp(log_tau);
    let attn = g.scale_axis(attn, tau, heads, d * d);
    let attn = g.softmax(attn);
    let out = g.bmm(attn, v, false, false);
    let out = g.reshape(out, &[n, heads, d, t]);
    let out = g.permute(out, &[0, 3, 1, 2]);
    Ok(g.reshape(out, &[n, h, w, c]))
}

/// Global channel-wise attention block followed by its FFN.
pub fn gca(g: &mut Graph, x: &FeatureMap, cfg: &AttentionConfig, name: &str) -> Result<FeatureMap> {
    gca_block(g, x, cfg, x.channels, name)
}

/// Global channel-wise attention block whose output projection maps to
/// `c_out` channels. For `c_out = 2C` the residual path repeats the input
/// channels twice; the FFN then runs at `c_out`.
pub fn gca_block(g: &mut Graph, x: &FeatureMap, cfg: &AttentionConfig, c_out: usize, name: &str) -> Result<FeatureMap> {
    let c = x.channels;
    check_heads(c, cfg.num_heads)?;
    let skip = if c_out == c {
        x.var
    } else if c_out == 2 * c {
        g.concat(&[x.var, x.var], 3)
    } else {
        return Err(Error::config(format!("channel attention cannot map {c} to {c_out} channels")));
    };
    let xn = norm(g, x.var, c, &format!("{name}.norm"))?;
    let a = xca_core(g, xn, x.dims(), cfg.num_heads, &format!("{name}.attn"))?;
    let p = dense(g, a, c, c_out, &format!("{name}.proj"))?;
    let y = g.add(skip, p);
    let y = ffn_var(g, y, c_out, cfg.ffn_ratio, &format!("{name}.ffn"))?;
    Ok(FeatureMap::wrap(g, y, x.stride))
}

/// Group channel-wise attention: shared query/key/value projections over all
/// channels, then output projection and FFN applied separately to the two
/// channel halves. Returns the two halves.
pub fn group_ca(g: &mut Graph, x: &FeatureMap, cfg: &AttentionConfig, name: &str) -> Result<(FeatureMap, FeatureMap)> {
    let c = x.channels;
    if c % 2 != 0 {
        return Err(Error::config(format!("group attention needs an even channel count, got {c}")));
    }
    check_heads(c, cfg.num_heads)?;
    let half = c / 2;
    let xn = norm(g, x.var, c, &format!("{name}.norm"))?;
    let a = xca_core(g, xn, x.dims(), cfg.num_heads, &format!("{name}.attn"))?;
    let mut outs = Vec::with_capacity(2);
    for grp in 0..2 {
        let ag = g.narrow(a, 3, grp * half, half);
        let xg = g.narrow(x.var, 3, grp * half, half);
        let p = dense(g, ag, half, half, &format!("{name}.proj{}", grp + 1))?;
        let y = g.add(xg, p);
        let y = ffn_var(g, y, half, cfg.ffn_ratio, &format!("{name}.ffn{}", grp + 1))?;
        outs.push(FeatureMap::wrap(g, y, x.stride));
    }
    Ok((outs[0], outs[1]))
}

/// Channel-concatenates two maps of equal resolution.
pub fn concat_channels(g: &mut Graph, a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if a.batch != b.batch || a.height != b.height || a.width != b.width || a.stride != b.stride {
        return Err(Error::shape("concatenated maps differ in resolution"));
    }
    let v = g.concat(&[a.var, b.var], 3);
    Ok(FeatureMap::wrap(g, v, a.stride))
}

/// Elementwise sum of two maps of identical shape and stride.
pub fn add_maps(g: &mut Graph, a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if a.dims() != b.dims() || a.stride != b.stride {
        return Err(Error::shape(format!(
            "cannot add {:?}@{} and {:?}@{}",
            a.dims(),
            a.stride,
            b.dims(),
            b.stride
        )));
    }
    let v = g.add(a.var, b.var);
    Ok(FeatureMap::wrap(g, v, a.stride))
}

/// Per-cell linear projection to `c_out` channels.
pub fn project(g: &mut Graph, x: &FeatureMap, c_out: usize, name: &str) -> Result<FeatureMap> {
    let y = dense(g, x.var, x.channels, c_out, name)?;
    Ok(FeatureMap::wrap(g, y, x.stride))
}
