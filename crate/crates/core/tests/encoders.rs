mod common;

use common::*;
use dfft_core::backbone::BackboneOutput;
use dfft_core::encoders::*;
use dfft_core::primitives::*;
use dfft_core::{Graph, ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;

const STRIDES: [usize; 4] = [8, 16, 32, 64];

fn small() -> EncoderConfig {
    EncoderConfig {
        sae_width: 8,
        tae_width: 8,
        num_group_blocks: 2,
        num_global_blocks: 2,
        sae_heads: 2,
        tae_heads: 2,
        ffn_ratio: 2,
    }
}

/// Random backbone features for an `image`-pixel input with the given widths.
fn features(r: &mut ChaCha8Rng, image: usize, channels: [usize; 4]) -> [Tensor; 4] {
    std::array::from_fn(|i| {
        let s = image / STRIDES[i];
        rand_tensor(r, &[1, s, s, channels[i]], 1.0)
    })
}

fn wrap(g: &mut Graph, feats: &[Tensor; 4]) -> BackboneOutput {
    let f_dot = std::array::from_fn(|i| FeatureMap::input(g, feats[i].clone(), STRIDES[i], false).unwrap());
    BackboneOutput { f_dot }
}

fn build_encoders(cfg: &EncoderConfig, feats: &[Tensor; 4], seed: u64) -> ParamStore {
    let mut store = ParamStore::new(seed);
    {
        let mut g = Graph::building(&mut store);
        let b = wrap(&mut g, feats);
        let s = sae(&mut g, &b, cfg, "sae").unwrap();
        tae(&mut g, &s, cfg, "tae").unwrap();
    }
    store.freeze();
    store.randomize(seed + 1, 0.3);
    store
}

#[test]
fn shapes_at_default_widths() {
    let cfg = EncoderConfig::default();
    let mut r = rng(0);
    let feats = features(&mut r, 256, [32, 64, 128, 256]);
    let mut store = ParamStore::new(0);
    let mut g = Graph::building(&mut store);
    let b = wrap(&mut g, &feats);
    let s = sae(&mut g, &b, &cfg, "sae").unwrap();
    assert_eq!((s.dims(), s.stride), ([1, 8, 8, 256], 32));
    let t = tae(&mut g, &s, &cfg, "tae").unwrap();
    assert_eq!(t.t_cls.dims(), [1, 8, 8, 256]);
    assert_eq!(t.t_reg.dims(), [1, 8, 8, 512]);
    assert_eq!(cfg.cls_width(), 256);
    assert_eq!(cfg.reg_width(), 512);
}

#[test]
fn sae_rejects_wrong_strides() {
    let mut r = rng(1);
    let feats = features(&mut r, 128, [4, 8, 8, 16]);
    let mut store = ParamStore::new(0);
    let mut g = Graph::building(&mut store);
    let mut b = wrap(&mut g, &feats);
    b.f_dot[2].stride = 16;
    assert!(sae(&mut g, &b, &small(), "sae").is_err());
    let s = FeatureMap::input(&mut g, Tensor::zeros(&[1, 4, 4, 8]), 16, false).unwrap();
    assert!(tae(&mut g, &s, &small(), "tae").is_err());
}

#[test]
fn config_validation() {
    let mut c = small();
    c.tae_width = 6;
    assert!(c.validate().is_err());
    let mut c = small();
    c.sae_heads = 3;
    assert!(c.validate().is_err());
    let mut c = small();
    c.num_group_blocks = 0;
    assert!(c.validate().unwrap_err().to_string().contains("num_group_blocks"));
    let mut c = small();
    c.tae_heads = 8;
    assert!(c.validate().is_err());
}

#[test]
fn sae_matches_scripted_composition() {
    let cfg = small();
    let mut r = rng(2);
    let feats = features(&mut r, 128, [4, 8, 8, 16]);
    let store = build_encoders(&cfg, &feats, 3);
    let mut g = Graph::new(&store);
    let b = wrap(&mut g, &feats);
    let out = sae(&mut g, &b, &cfg, "sae").unwrap();

    let att = AttentionConfig::new(2, 1, 2);
    let [f1, f2, f3, f4] = b.f_dot;
    let s0 = project(&mut g, &f1, 8, "sae.in1").unwrap();
    let d0 = downsample2x(&mut g, &s0, 8, "sae.down1").unwrap();
    let p2 = project(&mut g, &f2, 8, "sae.in2").unwrap();
    let s1 = add_maps(&mut g, &d0, &p2).unwrap();
    let s1 = gca(&mut g, &s1, &att, "sae.block1").unwrap();
    let d1 = downsample2x(&mut g, &s1, 8, "sae.down2").unwrap();
    let p3 = project(&mut g, &f3, 8, "sae.in3").unwrap();
    let s2 = add_maps(&mut g, &d1, &p3).unwrap();
    let s2 = gca(&mut g, &s2, &att, "sae.block2").unwrap();
    let u4 = upsample2x(&mut g, &f4, 8, "sae.up4").unwrap();
    let s3 = add_maps(&mut g, &s2, &u4).unwrap();
    let want = gca(&mut g, &s3, &att, "sae.block3").unwrap();
    assert_eq!(g.value(out.var), g.value(want.var));
}

#[test]
fn tae_matches_scripted_composition() {
    let cfg = small();
    let mut r = rng(4);
    let feats = features(&mut r, 128, [4, 8, 8, 16]);
    let store = build_encoders(&cfg, &feats, 5);
    let mut g = Graph::new(&store);
    let s = FeatureMap::input(&mut g, rand_tensor(&mut r, &[1, 4, 4, 8], 1.0), 32, false).unwrap();
    let out = tae(&mut g, &s, &cfg, "tae").unwrap();

    let att = AttentionConfig::new(2, 1, 2);
    let x = project(&mut g, &s, 8, "tae.expand").unwrap();
    let (a, b) = group_ca(&mut g, &x, &att, "tae.group0").unwrap();
    let x = concat_channels(&mut g, &a, &b).unwrap();
    let (t1, t2) = group_ca(&mut g, &x, &att, "tae.group1").unwrap();
    let r0 = gca_block(&mut g, &t2, &att, 4, "tae.global0").unwrap();
    let r1 = gca_block(&mut g, &r0, &att, 8, "tae.global1").unwrap();
    assert_eq!(g.value(out.t_cls.var), g.value(t1.var));
    assert_eq!(g.value(out.t_reg.var), g.value(r1.var));
}

/// Sum of the chosen task output weighted by a fixed random tensor; returns
/// the names of parameters whose gradient has a nonzero entry.
fn touched(store: &ParamStore, feats: &[Tensor; 4], cfg: &EncoderConfig, use_cls: bool) -> Vec<String> {
    let mut r = rng(6);
    let mut g = Graph::new(store);
    let b = wrap(&mut g, feats);
    let s = sae(&mut g, &b, cfg, "sae").unwrap();
    let t = tae(&mut g, &s, cfg, "tae").unwrap();
    let y = if use_cls { t.t_cls.var } else { t.t_reg.var };
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_tensor(&mut r, &shape, 1.0));
    let p = g.mul(y, w);
    let loss = g.sum(p);
    let grads = g.backward(loss);
    grads
        .params()
        .filter(|(_, t)| t.data().iter().any(|&v| v != 0.0))
        .map(|(i, _)| store.by_index(i).name.clone())
        .collect()
}

#[test]
fn classification_loss_never_reaches_global_branch() {
    let cfg = small();
    let mut r = rng(7);
    let feats = features(&mut r, 128, [4, 8, 8, 16]);
    let store = build_encoders(&cfg, &feats, 8);
    let cls = touched(&store, &feats, &cfg, true);
    assert!(store.names().any(|n| n.starts_with("tae.global")));
    assert!(cls.iter().all(|n| !n.starts_with("tae.global")), "{cls:?}");
    // nor the regression-side projection and FFN of the final split
    assert!(cls.iter().all(|n| !n.starts_with("tae.group1.proj2") && !n.starts_with("tae.group1.ffn2")));
    assert!(cls.iter().any(|n| n == "tae.group1.attn.qkv.weight"));

    let reg = touched(&store, &feats, &cfg, false);
    for b in 0..cfg.num_group_blocks {
        assert!(reg.contains(&format!("tae.group{b}.attn.qkv.weight")), "{reg:?}");
    }
    assert!(reg.iter().any(|n| n.starts_with("tae.global")));
}

#[test]
fn gradient_check_through_both_encoders() {
    let cfg = small();
    let mut r = rng(9);
    let feats = features(&mut r, 128, [4, 8, 8, 16]);
    let fixed = feats.clone();
    let build = move |g: &mut Graph, t: Tensor| {
        let f1 = FeatureMap::input(g, t, 8, true)?;
        let mut b = wrap(g, &fixed);
        b.f_dot[0] = f1;
        let s = sae(g, &b, &cfg, "sae")?;
        let out = tae(g, &s, &cfg, "tae")?;
        let a = g.reshape(out.t_cls.var, &[64]);
        let c = g.reshape(out.t_reg.var, &[128]);
        Ok((f1.var, g.concat(&[a, c], 0)))
    };
    let mut store = build_params(&feats[0], 10, &build);
    let err = fd_check(&mut store, &feats[0], build, 3, 11);
    assert!(err <= 1e-3, "relative error {err}");
}
