mod common;

use common::rng;
use lffn_core::detection::refine::{refine_backward, refine_forward, RefineParams};
use lffn_core::detection::{
    build_targets, compute_loss, decode_box, encode_box, flatten_predictions, generate_anchors,
    generate_pyramid_anchors, head_backward, head_forward, head_forward_traced, iou, label_anchors, sample_minibatch,
    scatter_predictions, AnchorConfig, AnchorLabel, AnchorTargets, Bbox, FlatPredictions, GtBox, HeadParams,
    LabelState, LevelPrediction, Minibatch, TargetConfig,
};
use lffn_core::gradcheck::{grad_check, project, Probe, END_TO_END_TOLERANCE, LAYER_TOLERANCE};
use lffn_core::kernels::softmax;
use lffn_core::params::ParamSet;
use lffn_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> Bbox {
    Bbox::new(x1, y1, x2, y2).unwrap()
}

/// IoU of integer-cornered boxes by counting covered unit cells.
fn raster_iou(a: [i32; 4], b: [i32; 4]) -> f64 {
    let inside = |r: [i32; 4], x: i32, y: i32| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0, 0);
    for y in -2..24 {
        for x in -2..24 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as i32;
            union += (ia || ib) as i32;
        }
    }
    inter as f64 / union as f64
}

#[test]
fn iou_hand_cases() {
    let a = bx(0.0, 0.0, 2.0, 2.0);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
    assert!((iou(&a, &bx(1.0, 1.0, 3.0, 3.0)) - 0.142_857_142_857).abs() < 1e-9);
}

#[test]
fn anchors_have_requested_area_ratio_and_count() {
    let config = AnchorConfig::default();
    let a = generate_anchors(1, 3, 5, &config).unwrap();
    assert_eq!(a.len(), 45);
    let square = a[1];
    assert!((square.width() - 64.0).abs() < 1e-12 && (square.height() - 64.0).abs() < 1e-12);
    for (i, b) in a.iter().enumerate() {
        let ratio = config.aspect_ratios[i % 3];
        assert!((b.area() - 4096.0).abs() < 1e-8);
        assert!((b.height() / b.width() - ratio).abs() < 1e-12);
        let cell = i / 3;
        let (cx, cy) = b.center();
        assert!((cx - 8.0 * ((cell % 5) as f64 + 0.5)).abs() < 1e-12);
        assert!((cy - 8.0 * ((cell / 5) as f64 + 0.5)).abs() < 1e-12);
    }
    let (all, offsets) = generate_pyramid_anchors(&[(4, 4), (2, 2), (1, 1)], &config).unwrap();
    assert_eq!(offsets, vec![0, 48, 60]);
    assert_eq!(all.len(), 63);
}

#[test]
fn labeling_rules() {
    let config = TargetConfig::default();
    let gt = bx(10.0, 10.0, 30.0, 30.0);
    let anchors = vec![
        gt,                          // identical
        bx(100.0, 100.0, 120.0, 120.0), // far away
        bx(10.0, 10.0, 30.0, 26.0),  // IoU 0.8
        bx(10.0, 10.0, 30.0, 22.0),  // IoU 0.6
    ];
    let l = label_anchors(&anchors, &[gt], &config).unwrap();
    assert_eq!(l[0], AnchorLabel::positive(0));
    assert_eq!(l[1], AnchorLabel::NEGATIVE);
    assert_eq!(l[2], AnchorLabel::positive(0));
    assert_eq!(l[3].state, LabelState::Ignore);

    // Best overlap of only 0.5 still makes the anchor positive for that gt.
    let gts = [bx(0.0, 0.0, 20.0, 20.0), bx(200.0, 0.0, 220.0, 20.0)];
    let anchors = vec![bx(0.0, 0.0, 20.0, 10.0), bx(200.0, 0.0, 220.0, 10.0), bx(400.0, 0.0, 420.0, 20.0)];
    let l = label_anchors(&anchors, &gts, &config).unwrap();
    assert_eq!(l, vec![AnchorLabel::positive(0), AnchorLabel::positive(1), AnchorLabel::NEGATIVE]);

    assert!(label_anchors(&anchors, &[], &config).unwrap().iter().all(|a| *a == AnchorLabel::NEGATIVE));
    assert!(matches!(label_anchors(&[], &gts, &config), Err(lffn_core::Error::Config(_))));
}

#[test]
fn sampling_quota_and_determinism() {
    let config = TargetConfig::default();
    let mut labels = vec![AnchorLabel::NEGATIVE; 1100];
    for l in labels.iter_mut().take(100) {
        *l = AnchorLabel::positive(0);
    }
    let a = sample_minibatch(&labels, &mut rng(1), &config).unwrap();
    assert_eq!((a.positives.len(), a.negatives.len()), (32, 96));
    assert!(a.positives.iter().all(|&i| i < 100) && a.negatives.iter().all(|&i| i >= 100));
    let mut seen = a.positives.clone();
    seen.extend(&a.negatives);
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 128);
    assert_eq!(sample_minibatch(&labels, &mut rng(1), &config).unwrap(), a);
    assert_ne!(sample_minibatch(&labels, &mut rng(2), &config).unwrap(), a);
}

#[test]
fn encode_hand_case_and_identity() {
    let anchor = Bbox::from_center(0.0, 0.0, 10.0, 10.0);
    assert_eq!(encode_box(&anchor, &anchor).unwrap(), [0.0; 4]);
    let shifted = Bbox::from_center(5.0, 0.0, 10.0, 10.0);
    assert_eq!(encode_box(&anchor, &shifted).unwrap(), [0.5, 0.0, 0.0, 0.0]);
}

fn two_level_instance(seed: u64, k: usize) -> (Vec<Tensor>, HeadParams) {
    let mut r = rng(seed);
    let levels = vec![
        Tensor::random_normal([2, 4, 4, 4], 1.0, &mut r),
        Tensor::random_normal([2, 4, 2, 2], 1.0, &mut r),
    ];
    let mut p = HeadParams::init(4, 3, k, &mut r);
    let generic: Vec<f64> = (0..p.num_params()).map(|_| r.random_range(-0.4..0.4)).collect();
    p.unflatten(&generic);
    (levels, p)
}

#[test]
fn head_shapes_and_zero_weights() {
    let p = HeadParams::zeros(256, 3, 2);
    let level = Tensor::random_normal([1, 256, 4, 4], 1.0, &mut rng(3));
    let out = head_forward(&[level], &p).unwrap();
    assert_eq!(out[0].logits.shape().dims(), [1, 6, 4, 4]);
    assert_eq!(out[0].deltas.shape().dims(), [1, 12, 4, 4]);
    let flat = flatten_predictions(&out, 0, 3);
    for a in 0..flat.len() {
        assert_eq!(softmax(flat.logits_of(a)), vec![0.5, 0.5]);
    }
    let e = head_forward(&[Tensor::zeros([1, 8, 2, 2])], &p).unwrap_err();
    assert!(matches!(e, lffn_core::Error::Dimension(_)));
}

#[test]
fn flatten_matches_anchor_order_and_scatter_inverts_it() {
    let (levels, p) = two_level_instance(4, 3);
    let out = head_forward(&levels, &p).unwrap();
    let flat = flatten_predictions(&out, 1, 3);
    assert_eq!(flat.len(), 3 * 16 + 3 * 4);
    // anchor at level 1, cell (y=1, x=0), shape a=2
    let idx = 48 + (2 + 0) * 3 + 2;
    assert_eq!(flat.logits_of(idx)[1], out[1].logits.at(1, 2 * 3 + 1, 1, 0));
    assert_eq!(flat.deltas[idx][3], out[1].deltas.at(1, 2 * 4 + 3, 1, 0));
    let mut back: Vec<LevelPrediction> = out.iter().map(|o| o.zeros_like()).collect();
    scatter_predictions(&flat, 1, 3, &mut back);
    for (b, o) in back.iter().zip(&out) {
        assert_eq!(b.logits.batch_item(1), o.logits.batch_item(1));
        assert!(b.logits.batch_item(0).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn head_gradients_pass_finite_differences() {
    let (levels, p) = two_level_instance(5, 3);
    let (out, cache) = head_forward_traced(&levels, &p).unwrap();
    let mut r = rng(6);
    let proj: Vec<LevelPrediction> = out
        .iter()
        .map(|o| LevelPrediction {
            logits: Tensor::random_normal(o.logits.shape(), 1.0, &mut r),
            deltas: Tensor::random_normal(o.deltas.shape(), 1.0, &mut r),
        })
        .collect();
    let (dx, dp) = head_backward(&cache, &p, &proj).unwrap();
    let probes = [
        Probe::new("params", p.flatten(), dp.flatten()),
        Probe::tensor("level0", &levels[0], &dx[0]),
        Probe::tensor("level1", &levels[1], &dx[1]),
    ];
    let report = grad_check("head", &probes, LAYER_TOLERANCE, |v| {
        let mut q = p.clone();
        q.unflatten(&v[0]);
        let ls = vec![
            Tensor::from_vec(levels[0].shape(), v[1].clone()).unwrap(),
            Tensor::from_vec(levels[1].shape(), v[2].clone()).unwrap(),
        ];
        head_forward(&ls, &q)
            .unwrap()
            .iter()
            .zip(&proj)
            .map(|(o, w)| project(&o.logits, &w.logits) + project(&o.deltas, &w.deltas))
            .sum()
    });
    assert!(report.pass, "{report}");
}

fn two_anchor_case() -> (FlatPredictions, Minibatch, AnchorTargets) {
    let pred = FlatPredictions {
        num_logits: 2,
        logits: vec![0.0, 1.0, 2.0, -1.0],
        deltas: vec![[0.5, -2.0, 0.0, 0.1], [9.0, 9.0, 9.0, 9.0]],
    };
    let batch = Minibatch {
        positives: vec![0],
        negatives: vec![1],
    };
    let targets = AnchorTargets {
        labels: vec![AnchorLabel::positive(0), AnchorLabel::NEGATIVE],
        classes: vec![1, 0],
        deltas: vec![[0.0, 0.0, 0.0, 0.0], [0.0; 4]],
    };
    (pred, batch, targets)
}

#[test]
fn loss_matches_hand_computation() {
    let (pred, batch, targets) = two_anchor_case();
    let (l, _) = compute_loss(&pred, &batch, &targets, 1.0).unwrap();
    // anchor 0: -ln(e / (1 + e)); anchor 1: -ln(e^2 / (e^2 + e^-1))
    let ce0 = (1.0 + (-1.0f64).exp()).ln();
    let ce1 = (1.0 + (-3.0f64).exp()).ln();
    assert!((l.classification - (ce0 + ce1) / 2.0).abs() < 1e-14);
    // 0.5·0.25 + (2 − 0.5) + 0 + 0.5·0.01
    assert!((l.localization - 1.63).abs() < 1e-14);
    assert!((l.total - (l.classification + l.localization)).abs() < 1e-15);
    assert_eq!((l.positives, l.negatives), (1, 1));

    let (l2, _) = compute_loss(&pred, &batch, &targets, 2.0).unwrap();
    assert!((l2.total - (l.classification + 3.26)).abs() < 1e-12);
}

#[test]
fn loss_degenerate_cases() {
    let (mut pred, batch, targets) = two_anchor_case();
    let neg_only = Minibatch {
        positives: vec![],
        negatives: vec![1],
    };
    let (l, _) = compute_loss(&pred, &neg_only, &targets, 1.0).unwrap();
    assert_eq!(l.localization, 0.0);
    assert_eq!(l.total, l.classification);
    let empty = Minibatch {
        positives: vec![],
        negatives: vec![],
    };
    assert!(matches!(compute_loss(&pred, &empty, &targets, 1.0), Err(lffn_core::Error::Loss(_))));

    pred.logits = vec![-40.0, 40.0, 40.0, -40.0];
    pred.deltas[0] = targets.deltas[0];
    let (l, _) = compute_loss(&pred, &batch, &targets, 1.0).unwrap();
    assert_eq!(l.localization, 0.0);
    assert!(l.classification < 1e-15);
}

#[test]
fn loss_gradient_passes_finite_differences() {
    let (pred, batch, targets) = two_anchor_case();
    let (_, g) = compute_loss(&pred, &batch, &targets, 1.5).unwrap();
    let flat_d = |p: &FlatPredictions| p.deltas.iter().flatten().copied().collect::<Vec<f64>>();
    let probes = [Probe::new("logits", pred.logits.clone(), g.logits.clone()), Probe::new("deltas", flat_d(&pred), flat_d(&g))];
    let report = grad_check("rpn_loss", &probes, LAYER_TOLERANCE, |v| {
        let mut p = pred.clone();
        p.logits = v[0].clone();
        for (i, d) in p.deltas.iter_mut().enumerate() {
            d.copy_from_slice(&v[1][i * 4..i * 4 + 4]);
        }
        compute_loss(&p, &batch, &targets, 1.5).unwrap().0.total
    });
    assert!(report.pass, "{report}");
}

/// Head plus loss on fixed features: one small gradient step lowers the loss.
#[test]
fn single_step_decreases_loss() {
    let config = AnchorConfig {
        strides: vec![8, 16],
        base_sizes: vec![16.0, 32.0],
        ..Default::default()
    };
    let (levels, mut p) = two_level_instance(7, 2);
    let levels: Vec<Tensor> = levels.iter().map(|t| Tensor::from_vec([1, 4, t.shape().h, t.shape().w], t.item(0).to_vec()).unwrap()).collect();
    let (anchors, _) = generate_pyramid_anchors(&[(4, 4), (2, 2)], &config).unwrap();
    let gts = [GtBox { bbox: bx(4.0, 4.0, 20.0, 22.0), class_id: 0 }];
    let tcfg = TargetConfig { batch_size: 16, ..Default::default() };
    let targets = build_targets(&anchors, &gts, &tcfg, false, (32.0, 32.0)).unwrap();
    let batch = sample_minibatch(&targets.labels, &mut rng(8), &tcfg).unwrap();
    let loss_of = |p: &HeadParams| {
        let out = head_forward(&levels, p).unwrap();
        compute_loss(&flatten_predictions(&out, 0, 3), &batch, &targets, 1.0).unwrap()
    };
    let (out, cache) = head_forward_traced(&levels, &p).unwrap();
    let (before, g) = compute_loss(&flatten_predictions(&out, 0, 3), &batch, &targets, 1.0).unwrap();
    let mut grads: Vec<LevelPrediction> = out.iter().map(|o| o.zeros_like()).collect();
    scatter_predictions(&g, 0, 3, &mut grads);
    let (_, gp) = head_backward(&cache, &p, &grads).unwrap();
    let stepped: Vec<f64> = p.flatten().iter().zip(gp.flatten()).map(|(w, d)| w - 1e-3 * d).collect();
    p.unflatten(&stepped);
    let (after, _) = loss_of(&p);
    assert!(before.total >= 0.0 && after.total < before.total, "{} -> {}", before.total, after.total);
}

#[test]
fn refine_head_gradients_pass_finite_differences() {
    let mut r = rng(9);
    let mut p = RefineParams::init(12, 6, 3, &mut r);
    let generic: Vec<f64> = p.flatten().iter().map(|v| v + r.random_range(-0.3..0.3)).collect();
    p.unflatten(&generic);
    let x: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
    let wl: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
    let wd = [0.3, -0.7, 1.1, 0.2];
    let (_, _, cache) = refine_forward(&x, &p).unwrap();
    let g = refine_backward(&cache, &p, &wl, &wd).unwrap();
    let report = grad_check("refine_head", &[Probe::new("params", p.flatten(), g.flatten())], END_TO_END_TOLERANCE, |v| {
        let mut q = p.clone();
        q.unflatten(&v[0]);
        let (l, d, _) = refine_forward(&x, &q).unwrap();
        l.iter().zip(&wl).map(|(a, b)| a * b).sum::<f64>() + d.iter().zip(&wd).map(|(a, b)| a * b).sum::<f64>()
    });
    assert!(report.pass, "{report}");
}

fn arb_box() -> impl Strategy<Value = Bbox> {
    (-50.0f64..50.0, -50.0f64..50.0, 0.5f64..60.0, 0.5f64..60.0).prop_map(|(x, y, w, h)| Bbox::from_center(x, y, w, h))
}

fn arb_int_box() -> impl Strategy<Value = [i32; 4]> {
    (0i32..15, 0i32..15, 1i32..8, 1i32..8).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

proptest! {
    #[test]
    fn iou_is_symmetric_bounded_and_matches_raster(a in arb_int_box(), b in arb_int_box()) {
        let fa = bx(a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64);
        let fb = bx(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64);
        let v = iou(&fa, &fb);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&fb, &fa));
        prop_assert!((v - raster_iou(a, b)).abs() < 1e-12);
        prop_assert_eq!(v == 1.0, a == b);
    }

    #[test]
    fn encode_decode_round_trip(a in arb_box(), g in arb_box()) {
        let d = encode_box(&a, &g).unwrap();
        let back = decode_box(&a, &d);
        for (x, y) in [(back.x1, g.x1), (back.y1, g.y1), (back.x2, g.x2), (back.y2, g.y2)] {
            prop_assert!((x - y).abs() < 1e-9, "{:?} vs {:?}", back, g);
        }
    }

    #[test]
    fn anchor_count_is_three_per_cell(level in 0usize..5, h in 1usize..9, w in 1usize..9) {
        prop_assert_eq!(generate_anchors(level, h, w, &AnchorConfig::default()).unwrap().len(), 3 * h * w);
    }

    #[test]
    fn every_overlapped_gt_gets_a_positive(gts in proptest::collection::vec(arb_box(), 1..5), seed in any::<u64>()) {
        let (anchors, _) = generate_pyramid_anchors(&[(6, 6), (3, 3)], &AnchorConfig {
            strides: vec![16, 32],
            base_sizes: vec![16.0, 40.0],
            ..Default::default()
        }).unwrap();
        let shift = (seed % 40) as f64;
        let gts: Vec<Bbox> = gts.iter().map(|g| Bbox { x1: g.x1 + 50.0 + shift, x2: g.x2 + 50.0 + shift, y1: g.y1 + 50.0, y2: g.y2 + 50.0 }).collect();
        let labels = label_anchors(&anchors, &gts, &TargetConfig::default()).unwrap();
        for l in &labels {
            prop_assert_eq!(l.state == LabelState::Positive, l.matched.is_some());
        }
        for (j, g) in gts.iter().enumerate() {
            let best = anchors.iter().map(|a| iou(a, g)).fold(0.0, f64::max);
            if best > 0.0 {
                let hit = anchors.iter().zip(&labels).any(|(a, l)| l.state == LabelState::Positive && iou(a, g) == best);
                prop_assert!(hit, "gt {} has no positive anchor", j);
            }
        }
    }
}
