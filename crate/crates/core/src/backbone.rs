//! Detection-oriented transformer backbone: patch embedding followed by four
//! stages of window attention capped by a global channel-attention block,
//! with semantic-augmented attention fusing every pair of consecutive stages.

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::primitives::{
    add_maps, downsample2x, gca, patch_embed, patch_merge, upsample2x, w_msa, AttentionConfig, FeatureMap,
    PATCH_SIZE,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DotStageConfig {
    pub channels: usize,
    /// Number of window-attention blocks before the channel-attention block.
    pub sa_blocks: usize,
    pub heads: usize,
    pub window_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stages: [DotStageConfig; 4],
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
}

pub(crate) fn default_ffn_ratio() -> usize {
    4
}

impl Default for BackboneConfig {
    /// The desk-scale "micro" variant.
    fn default() -> Self {
        Self::from_lists([32, 64, 128, 256], [1, 1, 2, 1], [2, 2, 4, 8], 4)
    }
}

impl BackboneConfig {
    pub fn from_lists(channels: [usize; 4], sa_blocks: [usize; 4], heads: [usize; 4], window_size: usize) -> Self {
        let stages = std::array::from_fn(|i| DotStageConfig {
            channels: channels[i],
            sa_blocks: sa_blocks[i],
            heads: heads[i],
            window_size,
        });
        Self {
            stages,
            ffn_ratio: default_ffn_ratio(),
        }
    }

    pub fn channels(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.stages[i].channels)
    }

    /// Checks widths, head divisibility and block counts.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            let stage = i + 1;
            if s.channels == 0 || s.sa_blocks == 0 || s.heads == 0 || s.window_size == 0 {
                return Err(Error::config(format!(
                    "backbone.stages[{i}]: channels, sa_blocks, heads and window_size must be positive"
                )));
            }
            if s.channels % s.heads != 0 {
                return Err(Error::config(format!(
                    "backbone.stages[{i}]: {} channels not divisible by {} heads (stage {stage})",
                    s.channels, s.heads
                )));
            }
        }
        for i in 1..4 {
            if self.stages[i].channels < self.stages[i - 1].channels {
                return Err(Error::config(format!(
                    "backbone.stages[{i}].channels: non-decreasing channel widths required ({} < {})",
                    self.stages[i].channels,
                    self.stages[i - 1].channels
                )));
            }
        }
        if self.ffn_ratio == 0 {
            return Err(Error::config("backbone.ffn_ratio must be positive"));
        }
        Ok(())
    }

    /// Checks that an `height x width` input fits every stage's window grid.
    pub fn validate_input(&self, height: usize, width: usize) -> Result<()> {
        for (axis, size) in [("height", height), ("width", width)] {
            if size == 0 || size % (PATCH_SIZE * 8) != 0 {
                return Err(Error::Dimension {
                    op: "forward_backbone",
                    axis,
                    size,
                    divisor: PATCH_SIZE * 8,
                });
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            let stride = PATCH_SIZE << i;
            let (h, w) = (height / stride, width / stride);
            let m = effective_window(s.window_size, h, w);
            for (axis, size) in [("height", h), ("width", w)] {
                if size % m != 0 {
                    return Err(Error::Dimension {
                        op: "forward_backbone",
                        axis,
                        size: size * stride,
                        divisor: m * stride,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Window side actually used on an `h x w` map: windows never exceed the map.
pub fn effective_window(window: usize, h: usize, w: usize) -> usize {
    window.min(h).min(w)
}

/// The four backbone features at strides 8, 16, 32 and 64.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    pub f_dot: [FeatureMap; 4],
}

/// Intermediate maps of a backbone pass, for structural inspection.
#[derive(Clone, Debug)]
pub struct BackboneTrace {
    /// Output of each stage's DOT block.
    pub block_out: [FeatureMap; 4],
    /// Output of each stage's semantic-augmented attention (stages 2-4).
    pub saa_out: [Option<FeatureMap>; 4],
    /// `(current, previous)` inputs of each stage's SAA (stages 2-4).
    pub saa_inputs: [Option<(FeatureMap, FeatureMap)>; 4],
}

/// `sa_blocks` window-attention blocks with alternating shift, then one
/// global channel-attention block.
pub fn dot_block(
    g: &mut Graph,
    x: &FeatureMap,
    stage: &DotStageConfig,
    ffn_ratio: usize,
    name: &str,
) -> Result<FeatureMap> {
    if x.channels != stage.channels {
        return Err(Error::shape(format!(
            "{name}: input has {} channels, stage expects {}",
            x.channels, stage.channels
        )));
    }
    let m = effective_window(stage.window_size, x.height, x.width);
    let cfg = AttentionConfig::new(stage.heads, stage.window_size, ffn_ratio).with_window(m);
    let mut y = *x;
    for j in 0..stage.sa_blocks {
        let shifted = j % 2 == 1 && m < x.height.min(x.width);
        y = w_msa(g, &y, &cfg, shifted, &format!("{name}.sa{j}"))?;
    }
    gca(g, &y, &cfg, &format!("{name}.gca"))
}

/// Semantic-augmented attention: `gca(up(f_cur) + f_prev)` at `f_prev`'s
/// resolution and width.
pub fn saa(
    g: &mut Graph,
    f_cur: &FeatureMap,
    f_prev: &FeatureMap,
    heads: usize,
    ffn_ratio: usize,
    name: &str,
) -> Result<FeatureMap> {
    if f_cur.stride != 2 * f_prev.stride {
        return Err(Error::shape(format!(
            "{name}: current stride {} must be twice the previous stride {}",
            f_cur.stride, f_prev.stride
        )));
    }
    let up = upsample2x(g, f_cur, f_prev.channels, &format!("{name}.up"))?;
    let fused = add_maps(g, &up, f_prev)?;
    let cfg = AttentionConfig::new(heads, 1, ffn_ratio);
    gca(g, &fused, &cfg, &format!("{name}.gca"))
}

pub fn forward_backbone(g: &mut Graph, image: &FeatureMap, cfg: &BackboneConfig, name: &str) -> Result<BackboneOutput> {
    forward_backbone_traced(g, image, cfg, name).map(|(out, _)| out)
}

/// Backbone pass that also returns every stage's intermediate maps.
///
/// Stage 1 embeds and runs its DOT block. Stage 2 patch-merges the stage-1
/// output. Stages 3 and 4 first bring the previous SAA output back to the
/// previous stage's resolution and width with `downsample2x`, then
/// patch-merge. Each SAA fuses the stage's block output with the map the
/// stage consumed.
pub fn forward_backbone_traced(
    g: &mut Graph,
    image: &FeatureMap,
    cfg: &BackboneConfig,
    name: &str,
) -> Result<(BackboneOutput, BackboneTrace)> {
    cfg.validate()?;
    cfg.validate_input(image.height, image.width)?;
    let st = &cfg.stages;
    let r = cfg.ffn_ratio;

    let embedded = patch_embed(g, image, st[0].channels, &format!("{name}.embed"))?;
    let f1 = dot_block(g, &embedded, &st[0], r, &format!("{name}.stage1.block"))?;

    let mut block_out = [f1; 4];
    let mut saa_out = [None; 4];
    let mut saa_inputs = [None; 4];

    // stage input at the previous stage's resolution
    let mut prev = f1;
    for i in 1..4 {
        let stage = format!("{name}.stage{}", i + 1);
        if i >= 2 {
            let tilde = saa_out[i - 1].expect("previous SAA output");
            prev = downsample2x(g, &tilde, st[i - 1].channels, &format!("{stage}.down"))?;
        }
        let merged = patch_merge(g, &prev, st[i].channels, &format!("{stage}.merge"))?;
        let fi = dot_block(g, &merged, &st[i], r, &format!("{stage}.block"))?;
        let fused = saa(g, &fi, &prev, st[i - 1].heads, r, &format!("{stage}.saa"))?;
        block_out[i] = fi;
        saa_out[i] = Some(fused);
        saa_inputs[i] = Some((fi, prev));
    }
    let f_dot = [
        saa_out[1].unwrap(),
        saa_out[2].unwrap(),
        saa_out[3].unwrap(),
        block_out[3],
    ];
    Ok((
        BackboneOutput { f_dot },
        BackboneTrace {
            block_out,
            saa_out,
            saa_inputs,
        },
    ))
}
