//! Analytic multiply-accumulate counts.
//!
//! One MAC is reported as one FLOP. Normalization, softmax, activations,
//! biases and elementwise additions are not counted. Counts are per image.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::effective_window;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::primitives::PATCH_SIZE;

pub fn macs_linear(n_cells: u64, c_in: u64, c_out: u64) -> u64 {
    n_cells * c_in * c_out
}

/// One window-attention block with its FFN on an `h x w x c` map.
pub fn macs_wmsa(h: u64, w: u64, c: u64, m: u64, ratio: u64) -> u64 {
    let n = h * w;
    4 * n * c * c + 2 * m * m * n * c + 2 * ratio * n * c * c
}

/// One global channel-attention block with its FFN.
pub fn macs_gca(n_cells: u64, c: u64, heads: u64, ratio: u64) -> u64 {
    macs_gca_block(n_cells, c, c, heads, ratio)
}

/// Channel-attention block whose output projection maps `c_in -> c_out`.
pub fn macs_gca_block(n: u64, c_in: u64, c_out: u64, heads: u64, ratio: u64) -> u64 {
    3 * n * c_in * c_in + 2 * n * c_in * c_in / heads + n * c_in * c_out + 2 * ratio * n * c_out * c_out
}

/// Group channel-attention block: shared QKV, two half-width projections and FFNs.
pub fn macs_group_ca(n: u64, c: u64, heads: u64, ratio: u64) -> u64 {
    let half = c / 2;
    3 * n * c * c + 2 * n * c * c / heads + 2 * (n * half * half + 2 * ratio * n * half * half)
}

pub fn macs_conv3x3(n_cells: u64, c_in: u64, c_out: u64) -> u64 {
    9 * n_cells * c_in * c_out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    Backbone,
    Sae,
    Tae,
    Head,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Backbone, Group::Sae, Group::Tae, Group::Head];

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Sae => "sae",
            Group::Tae => "tae",
            Group::Head => "head",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsEntry {
    pub name: String,
    pub group: Group,
    pub macs: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub entries: Vec<FlopsEntry>,
    pub image_h: usize,
    pub image_w: usize,
}

impl FlopsReport {
    fn push(&mut self, group: Group, name: impl Into<String>, macs: u64) {
        self.entries.push(FlopsEntry {
            name: name.into(),
            group,
            macs,
        });
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn group_total(&self, group: Group) -> u64 {
        self.entries.iter().filter(|e| e.group == group).map(|e| e.macs).sum()
    }

    /// `name,macs` lines, one per entry, with a header.
    pub fn rows(&self) -> String {
        let mut s = String::from("name,macs\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{}", e.name, e.macs);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "MACs for a {}x{} image (1 MAC = 1 FLOP; norms, softmax and activations excluded)\n",
            self.image_w, self.image_h
        );
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(0).max(8);
        for e in &self.entries {
            let _ = writeln!(s, "  {:<width$}  {:>16}", e.name, e.macs);
        }
        for g in Group::ALL {
            let _ = writeln!(s, "{:<10} {:>16}  ({:.4} G)", g.name(), self.group_total(g), gmacs(self.group_total(g)));
        }
        let _ = writeln!(s, "{:<10} {:>16}  ({:.4} G)", "total", self.total(), gmacs(self.total()));
        s
    }
}

fn gmacs(m: u64) -> f64 {
    m as f64 / 1e9
}

/// Costs of the full forward pass, mirroring the model's structure block by block.
pub fn macs_model(cfg: &ModelConfig, image_h: usize, image_w: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    cfg.backbone.validate_input(image_h, image_w)?;
    let mut r = FlopsReport {
        entries: Vec::new(),
        image_h,
        image_w,
    };
    let st = &cfg.backbone.stages;
    let ratio = cfg.backbone.ffn_ratio as u64;
    let dims = |i: usize| {
        let s = PATCH_SIZE << i;
        ((image_h / s) as u64, (image_w / s) as u64)
    };
    let cells = |i: usize| {
        let (h, w) = dims(i);
        h * w
    };
    let ch = |i: usize| st[i].channels as u64;
    let heads = |i: usize| st[i].heads as u64;

    let block = |r: &mut FlopsReport, i: usize, prefix: &str| {
        let (h, w) = dims(i);
        let m = effective_window(st[i].window_size, h as usize, w as usize) as u64;
        for j in 0..st[i].sa_blocks {
            r.push(Group::Backbone, format!("{prefix}.sa{j}"), macs_wmsa(h, w, ch(i), m, ratio));
        }
        r.push(Group::Backbone, format!("{prefix}.gca"), macs_gca(cells(i), ch(i), heads(i), ratio));
    };

    r.push(Group::Backbone, "backbone.embed", macs_linear(cells(0), (PATCH_SIZE * PATCH_SIZE * 3) as u64, ch(0)));
    block(&mut r, 0, "backbone.stage1.block");
    for i in 1..4 {
        let p = format!("backbone.stage{}", i + 1);
        if i >= 2 {
            r.push(Group::Backbone, format!("{p}.down"), macs_linear(cells(i - 1), ch(i - 2), ch(i - 1)));
        }
        r.push(Group::Backbone, format!("{p}.merge"), macs_linear(cells(i), 4 * ch(i - 1), ch(i)));
        block(&mut r, i, &format!("{p}.block"));
        r.push(Group::Backbone, format!("{p}.saa.up"), macs_linear(cells(i), ch(i), ch(i - 1)));
        r.push(
            Group::Backbone,
            format!("{p}.saa.gca"),
            macs_gca(cells(i - 1), ch(i - 1), heads(i - 1), ratio),
        );
    }

    let e = &cfg.encoder;
    let (ds, er, sh) = (e.sae_width as u64, e.ffn_ratio as u64, e.sae_heads as u64);
    let n32 = cells(2);
    r.push(Group::Sae, "sae.in1", macs_linear(cells(0), ch(0), ds));
    r.push(Group::Sae, "sae.down1", macs_linear(cells(1), ds, ds));
    r.push(Group::Sae, "sae.in2", macs_linear(cells(1), ch(1), ds));
    r.push(Group::Sae, "sae.block1", macs_gca(cells(1), ds, sh, er));
    r.push(Group::Sae, "sae.down2", macs_linear(n32, ds, ds));
    r.push(Group::Sae, "sae.in3", macs_linear(n32, ch(2), ds));
    r.push(Group::Sae, "sae.block2", macs_gca(n32, ds, sh, er));
    r.push(Group::Sae, "sae.up4", macs_linear(cells(3), ch(3), ds));
    r.push(Group::Sae, "sae.block3", macs_gca(n32, ds, sh, er));

    let (tw, th) = (e.tae_width as u64, e.tae_heads as u64);
    r.push(Group::Tae, "tae.expand", macs_linear(n32, ds, tw));
    for b in 0..e.num_group_blocks {
        r.push(Group::Tae, format!("tae.group{b}"), macs_group_ca(n32, tw, th, er));
    }
    for b in 0..e.num_global_blocks {
        let c_out = if b + 1 == e.num_global_blocks { tw } else { tw / 2 };
        r.push(Group::Tae, format!("tae.global{b}"), macs_gca_block(n32, tw / 2, c_out, th, er));
    }

    let k = cfg.head.anchors_per_cell() as u64;
    r.push(Group::Head, "head.cls", macs_linear(n32, e.cls_width() as u64, k * cfg.num_classes as u64));
    r.push(Group::Head, "head.reg", macs_linear(n32, e.reg_width() as u64, k * 4));
    Ok(r)
}

/// Conventional multi-level comparator: per backbone level a 1x1 lateral
/// projection and 3x3 smoothing conv to `width`, then separate
/// classification and regression towers of `tower_depth` 3x3 convs and 3x3
/// predictors, RetinaNet style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultilevelHead {
    pub width: usize,
    pub tower_depth: usize,
    pub anchors_per_cell: usize,
}

impl Default for MultilevelHead {
    fn default() -> Self {
        Self {
            width: 256,
            tower_depth: 4,
            anchors_per_cell: 9,
        }
    }
}

pub fn macs_multilevel(cfg: &ModelConfig, head: &MultilevelHead, image_h: usize, image_w: usize) -> Result<u64> {
    cfg.backbone.validate_input(image_h, image_w)?;
    if head.width == 0 || head.anchors_per_cell == 0 {
        return Err(Error::config("multilevel head width and anchor count must be positive"));
    }
    let (wd, a, nc) = (head.width as u64, head.anchors_per_cell as u64, cfg.num_classes as u64);
    let mut total = 0;
    for (i, s) in cfg.backbone.stages.iter().enumerate() {
        let stride = PATCH_SIZE << i;
        let n = ((image_h / stride) * (image_w / stride)) as u64;
        total += macs_linear(n, s.channels as u64, wd) + macs_conv3x3(n, wd, wd);
        total += 2 * head.tower_depth as u64 * macs_conv3x3(n, wd, wd);
        total += macs_conv3x3(n, wd, a * nc) + macs_conv3x3(n, wd, a * 4);
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Comparison {
    /// SAE + TAE + single-level head.
    pub single_macs: u64,
    pub multilevel_macs: u64,
    pub ratio: f64,
}

/// Neck-plus-head cost of the single-level design against the multi-level
/// comparator on the same backbone features.
pub fn compare_single_vs_multilevel(
    cfg: &ModelConfig,
    head: &MultilevelHead,
    image_h: usize,
    image_w: usize,
) -> Result<Comparison> {
    let r = macs_model(cfg, image_h, image_w)?;
    let single_macs = r.group_total(Group::Sae) + r.group_total(Group::Tae) + r.group_total(Group::Head);
    let multilevel_macs = macs_multilevel(cfg, head, image_h, image_w)?;
    Ok(Comparison {
        single_macs,
        multilevel_macs,
        ratio: single_macs as f64 / multilevel_macs as f64,
    })
}
