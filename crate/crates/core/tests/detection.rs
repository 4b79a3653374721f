mod common;

use common::*;
use dfft_core::detection::*;
use dfft_core::primitives::FeatureMap;
use dfft_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use std::rc::Rc;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn anchors_sit_on_cell_centres() {
    let a = generate_anchors(2, 2, 32, &[32.0]).unwrap();
    let centres: Vec<(f64, f64)> = a.anchors.iter().map(|b| b.center()).collect();
    assert_eq!(centres, vec![(16.0, 16.0), (48.0, 16.0), (16.0, 48.0), (48.0, 48.0)]);
    let b = generate_anchors(1, 1, 32, &[32.0, 64.0]).unwrap();
    assert_eq!(b.anchors, vec![BBox::new(0.0, 0.0, 32.0, 32.0), BBox::new(-16.0, -16.0, 48.0, 48.0)]);
    assert!(generate_anchors(2, 2, 32, &[]).is_err());
}

#[test]
fn anchors_match_double_loop_construction() {
    let sizes = [32.0, 64.0, 128.0, 256.0, 512.0];
    let a = generate_anchors(8, 8, 32, &sizes).unwrap();
    let mut want = Vec::new();
    for i in 0..8 {
        for j in 0..8 {
            for s in sizes {
                let (cx, cy) = (32.0 * j as f64 + 16.0, 32.0 * i as f64 + 16.0);
                want.push(BBox::new(cx - s / 2.0, cy - s / 2.0, cx + s / 2.0, cy + s / 2.0));
            }
        }
    }
    assert_eq!(a.len(), 320);
    assert_eq!(a.anchors, want);
}

#[test]
fn box_coding_cases() {
    let anchor = BBox::new(0.0, 0.0, 32.0, 32.0);
    assert_eq!(encode_deltas(&anchor, &anchor).unwrap(), [0.0; 4]);
    let d = encode_deltas(&anchor, &BBox::new(8.0, 8.0, 56.0, 56.0)).unwrap();
    let want = [0.5, 0.5, 1.5f64.ln(), 1.5f64.ln()];
    for (x, y) in d.iter().zip(want) {
        assert!(close(*x, y, 1e-15));
    }
    assert!(encode_deltas(&anchor, &BBox::new(5.0, 5.0, 5.0, 9.0)).is_err());
}

#[test]
fn focal_reduces_to_half_bce() {
    let z = [-2.0, -0.3, 0.0, 0.7, 3.1];
    let t = [1.0, 0.0, 1.0, 0.0, 1.0];
    let bce: f64 = z
        .iter()
        .zip(t)
        .map(|(&z, t)| {
            let p = 1.0 / (1.0 + (-z as f64).exp());
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    assert!(close(focal_loss(&z, &t, 0.5, 0.0), 0.5 * bce, 1e-12));
}

#[test]
fn focal_scalar_case_and_limit() {
    let v = focal_loss(&[0.0], &[1.0], 0.25, 2.0);
    assert!(close(v, 0.25 * 0.25 * 2f64.ln(), 1e-12));
    assert!(close(v, 0.043322, 1e-6));
    let mut prev = f64::INFINITY;
    for z in [0.0, 1.0, 2.0, 4.0, 8.0, 16.0] {
        let l = focal_loss(&[z], &[1.0], 0.25, 2.0);
        assert!(l < prev);
        prev = l;
    }
    assert!(prev < 1e-12);
}

#[test]
fn giou_cases() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    let b = BBox::new(1.0, 1.0, 3.0, 3.0);
    assert!(close(giou(&a, &b), 1.0 / 7.0 - 2.0 / 9.0, 1e-12));
    assert!(close(giou_loss(&a, &b), 1.0794, 1e-4));
    assert_eq!(giou_loss(&a, &a), 0.0);
    let far = BBox::new(1e6, 1e6, 1e6 + 2.0, 1e6 + 2.0);
    assert!(close(giou_loss(&a, &far), 2.0, 1e-5));
}

#[test]
fn matching_with_no_boxes_is_all_negative() {
    let a = generate_anchors(4, 4, 32, &[32.0, 64.0]).unwrap();
    let m = uniform_match(&a.anchors, &[], &MatchParams::default()).unwrap();
    assert!(m.labels.iter().all(|l| *l == MatchLabel::Negative));
}

#[test]
fn matching_six_anchors_on_a_line() {
    let anchors: Vec<BBox> = (0..6).map(|i| BBox::from_xywh(10.0 * i as f64, 0.0, 8.0, 8.0)).collect();
    let gt = BBox::from_xywh(27.0, 0.0, 8.0, 8.0);
    let p = MatchParams {
        k: 2,
        neg_ignore_iou: 0.99,
        pos_ignore_iou: 0.0,
    };
    let m = uniform_match(&anchors, &[gt], &p).unwrap();
    // exhaustive oracle: sort by centre distance
    let mut order: Vec<usize> = (0..6).collect();
    let d = |i: usize| (anchors[i].center().0 - gt.center().0).abs();
    order.sort_by(|&a, &b| d(a).total_cmp(&d(b)));
    let mut want = order[..2].to_vec();
    want.sort();
    let got: Vec<usize> = (0..6).filter(|&i| m.labels[i] == MatchLabel::Positive(0)).collect();
    assert_eq!(got, want);
    assert_eq!(got, vec![2, 3]);
}

#[test]
fn matching_two_distant_boxes_matches_oracle() {
    let a = generate_anchors(10, 10, 32, &[32.0]).unwrap();
    let gts = [BBox::new(20.0, 30.0, 90.0, 80.0), BBox::new(230.0, 200.0, 300.0, 310.0)];
    let m = uniform_match(&a.anchors, &gts, &MatchParams::default()).unwrap();
    let mut got = m.matched.clone();
    got.sort();
    assert_eq!(got, brute_force_match(&a.anchors, &gts, 4));
    for gi in 0..2 {
        assert_eq!(m.matched.iter().filter(|(_, g)| *g == gi).count(), 4);
    }
}

#[test]
fn matching_rejects_impossible_requests() {
    let a = generate_anchors(1, 2, 32, &[32.0]).unwrap();
    let gt = [BBox::new(0.0, 0.0, 10.0, 10.0)];
    let p = |k| MatchParams { k, ..MatchParams::default() };
    assert!(uniform_match(&a.anchors, &gt, &p(3)).is_err());
    assert!(uniform_match(&a.anchors, &gt, &p(0)).is_err());
}

#[test]
fn matching_ignore_rules() {
    let anchors = vec![
        BBox::new(0.0, 0.0, 32.0, 32.0),
        BBox::new(200.0, 200.0, 232.0, 232.0),
        BBox::new(1.0, 1.0, 33.0, 33.0),
    ];
    let gts = [BBox::new(0.0, 0.0, 32.0, 32.0), BBox::new(240.0, 240.0, 250.0, 250.0)];
    let p = MatchParams { k: 1, ..MatchParams::default() };
    let m = uniform_match(&anchors, &gts, &p).unwrap();
    assert_eq!(m.labels[0], MatchLabel::Positive(0));
    // nearest to the second box but with zero overlap
    assert_eq!(m.labels[1], MatchLabel::Ignore);
    // unmatched yet overlapping the first box well above 0.7
    assert_eq!(m.labels[2], MatchLabel::Ignore);
    assert_eq!(m.matched.len(), 2);
}

#[test]
fn head_shapes_and_bias_only_output() {
    let mut store = ParamStore::new(0);
    let mut g = Graph::building(&mut store);
    let c = FeatureMap::input(&mut g, Tensor::full(&[1, 8, 8, 256], 0.3), 32, false).unwrap();
    let r = FeatureMap::input(&mut g, Tensor::full(&[1, 8, 8, 512], 0.3), 32, false).unwrap();
    let p = predict(&mut g, &c, &r, 80, 5, "head").unwrap();
    assert_eq!(g.shape(p.logits), &[320, 80]);
    assert_eq!(g.shape(p.deltas), &[320, 4]);
    let bad = FeatureMap::input(&mut g, Tensor::zeros(&[1, 4, 8, 512]), 32, false).unwrap();
    assert!(predict(&mut g, &c, &bad, 80, 5, "head2").is_err());
    drop(g);

    store.get_mut("head.cls.weight").unwrap().value.data_mut().fill(0.0);
    store.get_mut("head.cls.bias").unwrap().value.data_mut().fill(-1.25);
    let mut g = Graph::new(&store);
    let c = FeatureMap::input(&mut g, Tensor::full(&[1, 8, 8, 256], 0.3), 32, false).unwrap();
    let r = FeatureMap::input(&mut g, Tensor::full(&[1, 8, 8, 512], 0.3), 32, false).unwrap();
    let p = predict(&mut g, &c, &r, 80, 5, "head").unwrap();
    assert!(g.value(p.logits).data().iter().all(|&v| v == -1.25));
}

#[test]
fn head_single_cell_matches_dense_oracle() {
    let mut r = rng(1);
    let ct = rand_tensor(&mut r, &[1, 1, 1, 6], 1.0);
    let rt = rand_tensor(&mut r, &[1, 1, 1, 4], 1.0);
    let mut store = ParamStore::new(2);
    {
        let mut g = Graph::building(&mut store);
        let c = FeatureMap::input(&mut g, ct.clone(), 32, false).unwrap();
        let q = FeatureMap::input(&mut g, rt.clone(), 32, false).unwrap();
        predict(&mut g, &c, &q, 3, 1, "h").unwrap();
    }
    store.freeze();
    store.randomize(3, 0.5);
    let mut g = Graph::new(&store);
    let c = FeatureMap::input(&mut g, ct.clone(), 32, false).unwrap();
    let q = FeatureMap::input(&mut g, rt.clone(), 32, false).unwrap();
    let p = predict(&mut g, &c, &q, 3, 1, "h").unwrap();
    let want = dense_oracle(ct.data(), 1, 6, &param(&store, "h.cls.weight"), &param(&store, "h.cls.bias"), 3);
    assert!(g.value(p.logits).data().iter().zip(&want).all(|(a, b)| close(*a, *b, 1e-12)));
    let want = dense_oracle(rt.data(), 1, 4, &param(&store, "h.reg.weight"), &param(&store, "h.reg.bias"), 4);
    assert!(g.value(p.deltas).data().iter().zip(&want).all(|(a, b)| close(*a, *b, 1e-12)));
}

#[test]
fn nms_cases() {
    let b = BBox::new(0.0, 0.0, 10.0, 10.0);
    let d = |bbox, score| Detection { bbox, class: 0, score };
    let kept = nms(&[d(b, 0.8), d(b, 0.9)], 0.6, 0.05, 100);
    assert_eq!(kept, vec![d(b, 0.9)]);
    let far = BBox::new(50.0, 50.0, 60.0, 60.0);
    assert_eq!(nms(&[d(b, 0.5), d(far, 0.7)], 0.6, 0.05, 100).len(), 2);
    // different classes never suppress each other
    let other = Detection { bbox: b, class: 1, score: 0.7 };
    assert_eq!(nms(&[d(b, 0.9), other], 0.6, 0.05, 100).len(), 2);
}

#[test]
fn nms_matches_reference_on_random_boxes() {
    let mut r = rng(4);
    for _ in 0..20 {
        let dets: Vec<Detection> = (0..20)
            .map(|_| Detection {
                bbox: random_box(&mut r, 100.0),
                class: r.random_range(0..2),
                score: r.random::<f64>(),
            })
            .collect();
        assert_eq!(nms(&dets, 0.5, 0.05, 100), nms_oracle(&dets, 0.5, 0.05, 100));
        assert_eq!(nms(&dets, 0.3, 0.2, 5), nms_oracle(&dets, 0.3, 0.2, 5));
    }
}

#[test]
fn postprocess_clips_and_sorts() {
    let a = generate_anchors(2, 2, 32, &[32.0, 96.0]).unwrap();
    let mut r = rng(5);
    let logits = rand_vec(&mut r, a.len() * 2, 4.0);
    let deltas = rand_vec(&mut r, a.len() * 4, 0.5);
    let cfg = HeadConfig::default();
    let dets = postprocess(&logits, &deltas, &a, 2, 64.0, 64.0, &cfg);
    assert!(!dets.is_empty());
    for w in dets.windows(2) {
        assert!(w[0].score >= w[1].score);
    }
    for d in &dets {
        assert!(d.bbox.x1 >= 0.0 && d.bbox.y1 >= 0.0 && d.bbox.x2 <= 64.0 && d.bbox.y2 <= 64.0);
        assert!((0.0..=1.0).contains(&d.score) && d.score >= cfg.score_thresh);
    }
    assert_eq!(dets, postprocess(&logits, &deltas, &a, 2, 64.0, 64.0, &cfg));
}

#[test]
fn loss_gradients_match_finite_differences() {
    let anchors = generate_anchors(2, 2, 32, &[32.0, 64.0]).unwrap();
    let gts = vec![vec![
        GroundTruth { bbox: BBox::new(4.0, 6.0, 40.0, 30.0), class: 1 },
        GroundTruth { bbox: BBox::new(30.0, 28.0, 62.0, 60.0), class: 0 },
    ]];
    let cfg = HeadConfig {
        anchor_sizes: vec![32.0, 64.0],
        match_k: 2,
        ..HeadConfig::default()
    };
    let mut r = rng(6);
    let t_cls = rand_tensor(&mut r, &[1, 2, 2, 4], 1.0);
    let t_reg = rand_tensor(&mut r, &[1, 2, 2, 6], 1.0);
    let build = move |g: &mut Graph, t: Tensor| {
        let c = FeatureMap::input(g, t_cls.clone(), 32, false)?;
        let q = FeatureMap::input(g, t, 32, true)?;
        let p = predict(g, &c, &q, 2, 2, "head")?;
        let l = detection_loss(g, &p, &anchors, &gts, 2, &cfg)?;
        assert_eq!(l.num_pos, 4);
        Ok((q.var, l.total))
    };
    let mut store = build_params(&t_reg, 7, &build);
    let err = fd_check(&mut store, &t_reg, build, 4, 8);
    assert!(err <= 1e-3, "relative error {err}");
}

#[test]
fn focal_and_giou_ops_match_finite_differences() {
    let mut r = rng(9);
    let z = rand_tensor(&mut r, &[6, 3], 2.0);
    let targets: Vec<f64> = (0..18).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    let weights = vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0];
    let focal = |g: &mut Graph, t: Tensor| {
        let x = g.input(t, true);
        Ok((x, g.focal_loss(x, &targets, &weights, 0.25, 2.0, 3.0)))
    };
    let mut store = ParamStore::new(0);
    assert!(fd_check(&mut store, &z, focal, 10, 10) <= 1e-3);

    let anchors: Vec<[f64; 4]> = (0..3).map(|_| random_box(&mut r, 50.0).to_array()).collect();
    let gts: Vec<[f64; 4]> = (0..3).map(|_| random_box(&mut r, 50.0).to_array()).collect();
    let d = rand_tensor(&mut r, &[3, 4], 0.3);
    let reg = move |g: &mut Graph, t: Tensor| {
        let x = g.input(t, true);
        let b = g.decode_boxes(x, Rc::new(anchors.clone()));
        Ok((x, g.giou_loss(b, &gts, 3.0)))
    };
    assert!(fd_check(&mut store, &d, reg, 12, 11) <= 1e-3);
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 1.0..120.0f64, 1.0..120.0f64).prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn giou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (g1, g2) = (giou(&a, &b), giou(&b, &a));
        prop_assert!((g1 - g2).abs() < 1e-12);
        prop_assert!(g1 <= iou(&a, &b) + 1e-12);
        prop_assert!(g1 > -1.0 && g1 <= 1.0);
        prop_assert!((iou(&a, &b) - iou_oracle(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn coding_round_trip(a in arb_box(), b in arb_box()) {
        let d = encode_deltas(&a, &b).unwrap();
        let back = decode_boxes(&a, &d);
        for (x, y) in back.to_array().iter().zip(b.to_array()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn matching_counts_and_permutation(gts in prop::collection::vec(arb_box(), 0..4), seed in any::<u64>()) {
        let a = generate_anchors(6, 6, 32, &[32.0, 96.0]).unwrap();
        let p = MatchParams::default();
        let m = uniform_match(&a.anchors, &gts, &p).unwrap();
        prop_assert_eq!(m.matched.len(), p.k * gts.len());
        let mut per_anchor = vec![0; a.len()];
        for &(ai, _) in &m.matched {
            per_anchor[ai] += 1;
        }
        prop_assert!(per_anchor.iter().all(|&c| c <= 1));
        let mut got = m.matched.clone();
        got.sort();
        prop_assert_eq!(&got, &brute_force_match(&a.anchors, &gts, p.k));

        let mut perm: Vec<usize> = (0..a.len()).collect();
        perm.shuffle(&mut rng(seed));
        let shuffled: Vec<BBox> = perm.iter().map(|&i| a.anchors[i]).collect();
        let m2 = uniform_match(&shuffled, &gts, &p).unwrap();
        let mut back: Vec<(usize, usize)> = m2.matched.iter().map(|&(ai, g)| (perm[ai], g)).collect();
        back.sort();
        prop_assert_eq!(back, got);
    }
}
