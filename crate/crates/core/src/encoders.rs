//! Encoder-only single-level neck.
//!
//! The scale-aggregated encoder folds the four backbone scales into one
//! stride-32 map with three channel-attention blocks; the task-aligned
//! encoder expands it, runs stacked group channel-attention blocks that end
//! in a classification/regression split, and encodes the regression half
//! further with global channel-attention blocks.

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{default_ffn_ratio, BackboneOutput};
use crate::error::{Error, Result};
use crate::primitives::{
    add_maps, concat_channels, downsample2x, gca, gca_block, group_ca, project, upsample2x, AttentionConfig,
    FeatureMap,
};

pub const SAE_STRIDE: usize = 32;
const BACKBONE_STRIDES: [usize; 4] = [8, 16, 32, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Width of the aggregation stream.
    pub sae_width: usize,
    /// Width of the task-aligned stream; split into two halves.
    pub tae_width: usize,
    pub num_group_blocks: usize,
    pub num_global_blocks: usize,
    pub sae_heads: usize,
    pub tae_heads: usize,
    pub ffn_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            sae_width: 256,
            tae_width: 512,
            num_group_blocks: 2,
            num_global_blocks: 1,
            sae_heads: 8,
            tae_heads: 8,
            ffn_ratio: default_ffn_ratio(),
        }
    }
}

impl EncoderConfig {
    pub fn cls_width(&self) -> usize {
        self.tae_width / 2
    }

    pub fn reg_width(&self) -> usize {
        self.tae_width
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("sae_width", self.sae_width),
            ("tae_width", self.tae_width),
            ("num_group_blocks", self.num_group_blocks),
            ("num_global_blocks", self.num_global_blocks),
            ("sae_heads", self.sae_heads),
            ("tae_heads", self.tae_heads),
            ("ffn_ratio", self.ffn_ratio),
        ];
        for (field, v) in pos {
            if v == 0 {
                return Err(Error::config(format!("encoder.{field} must be positive")));
            }
        }
        if self.tae_width % 2 != 0 {
            return Err(Error::config("encoder.tae_width must be even"));
        }
        if self.sae_width % self.sae_heads != 0 {
            return Err(Error::config("encoder.sae_heads must divide encoder.sae_width"));
        }
        if self.tae_width % self.tae_heads != 0 || (self.tae_width / 2) % self.tae_heads != 0 {
            return Err(Error::config(
                "encoder.tae_heads must divide both encoder.tae_width and half of it",
            ));
        }
        Ok(())
    }

    fn sae_attention(&self) -> AttentionConfig {
        AttentionConfig::new(self.sae_heads, 1, self.ffn_ratio)
    }

    fn tae_attention(&self) -> AttentionConfig {
        AttentionConfig::new(self.tae_heads, 1, self.ffn_ratio)
    }
}

/// Scale-aggregated encoder. Every backbone feature is projected to the
/// aggregation width before it is added to the running stream:
///
/// ```text
/// s0 = proj(f1)
/// s1 = gca(down(s0) + proj(f2))
/// s2 = gca(down(s1) + proj(f3))
/// s3 = gca(s2 + up(f4))
/// ```
pub fn sae(g: &mut Graph, feats: &BackboneOutput, cfg: &EncoderConfig, name: &str) -> Result<FeatureMap> {
    cfg.validate()?;
    for (i, (f, want)) in feats.f_dot.iter().zip(BACKBONE_STRIDES).enumerate() {
        if f.stride != want {
            return Err(Error::shape(format!(
                "{name}: backbone feature {} has stride {}, expected {want}",
                i + 1,
                f.stride
            )));
        }
    }
    let [f1, f2, f3, f4] = feats.f_dot;
    let d = cfg.sae_width;
    let att = cfg.sae_attention();

    let s0 = project(g, &f1, d, &format!("{name}.in1"))?;
    let down0 = downsample2x(g, &s0, d, &format!("{name}.down1"))?;
    let p2 = project(g, &f2, d, &format!("{name}.in2"))?;
    let s1 = add_maps(g, &down0, &p2)?;
    let s1 = gca(g, &s1, &att, &format!("{name}.block1"))?;

    let down1 = downsample2x(g, &s1, d, &format!("{name}.down2"))?;
    let p3 = project(g, &f3, d, &format!("{name}.in3"))?;
    let s2 = add_maps(g, &down1, &p3)?;
    let s2 = gca(g, &s2, &att, &format!("{name}.block2"))?;

    let up4 = upsample2x(g, &f4, d, &format!("{name}.up4"))?;
    let s3 = add_maps(g, &s2, &up4)?;
    gca(g, &s3, &att, &format!("{name}.block3"))
}

/// Output of the task-aligned encoder.
#[derive(Clone, Copy, Debug)]
pub struct TaskFeatures {
    pub t_cls: FeatureMap,
    pub t_reg: FeatureMap,
}

/// Task-aligned encoder: expand to `tae_width`, stacked group blocks (the
/// last one yields the split), then global blocks on the regression half,
/// the last of which doubles its width.
pub fn tae(g: &mut Graph, s: &FeatureMap, cfg: &EncoderConfig, name: &str) -> Result<TaskFeatures> {
    cfg.validate()?;
    if s.stride != SAE_STRIDE {
        return Err(Error::shape(format!("{name}: input stride {} != {SAE_STRIDE}", s.stride)));
    }
    let att = cfg.tae_attention();
    let mut x = project(g, s, cfg.tae_width, &format!("{name}.expand"))?;
    let mut split = None;
    for b in 0..cfg.num_group_blocks {
        let (t1, t2) = group_ca(g, &x, &att, &format!("{name}.group{b}"))?;
        if b + 1 == cfg.num_group_blocks {
            split = Some((t1, t2));
        } else {
            x = concat_channels(g, &t1, &t2)?;
        }
    }
    let (t1, t2) = split.expect("at least one group block");
    let half = cfg.tae_width / 2;
    let mut r = t2;
    for b in 0..cfg.num_global_blocks {
        let c_out = if b + 1 == cfg.num_global_blocks { cfg.tae_width } else { half };
        r = gca_block(g, &r, &att, c_out, &format!("{name}.global{b}"))?;
    }
    Ok(TaskFeatures { t_cls: t1, t_reg: r })
}
