mod common;

use common::rng;
use lffn_core::detection::Bbox;
use lffn_core::eval::{
    average_precision, evaluate, match_detections, mean_ap, pr_curve, ApMethod, EvalConfig, Matched,
};
use lffn_core::formats::{GtRecord, PredRecord};
use proptest::prelude::*;
use rand::Rng;

fn gt(img: &str, class_id: usize, b: [f64; 4]) -> GtRecord {
    GtRecord { image_id: img.into(), class_id, bbox: Bbox::new(b[0], b[1], b[2], b[3]).unwrap() }
}

fn pred(img: &str, class_id: usize, score: f64, b: [f64; 4]) -> PredRecord {
    PredRecord { image_id: img.into(), class_id, score, bbox: Bbox::new(b[0], b[1], b[2], b[3]).unwrap() }
}

fn flags(m: &[Matched]) -> Vec<bool> {
    m.iter().map(|x| x.true_positive).collect()
}

#[test]
fn matching_examples() {
    let c = EvalConfig::default();
    let g = [gt("a", 0, [0.0, 0.0, 10.0, 10.0])];
    assert_eq!(flags(&match_detections(&[pred("a", 0, 0.9, [0.0, 0.0, 10.0, 10.0])], &g, &c)), vec![true]);
    let two = [pred("a", 0, 0.8, [0.0, 0.0, 10.0, 10.0]), pred("a", 0, 0.9, [0.0, 0.0, 10.0, 10.0])];
    let m = match_detections(&two, &g, &c);
    assert_eq!(flags(&m), vec![true, false]);
    assert_eq!(m[0].score, 0.9);
    // IoU of (0,0,10,10) and (0,0,10,4) is 0.4
    assert_eq!(flags(&match_detections(&[pred("a", 0, 0.9, [0.0, 0.0, 10.0, 4.0])], &g, &c)), vec![false]);
    // same box in another image never matches
    assert_eq!(flags(&match_detections(&[pred("b", 0, 0.9, [0.0, 0.0, 10.0, 10.0])], &g, &c)), vec![false]);
}

#[test]
fn curve_and_ap_examples() {
    let all_tp: Vec<Matched> = (0..3).map(|i| Matched { score: 1.0 - i as f64 * 0.1, true_positive: true }).collect();
    let c = pr_curve(&all_tp, 5);
    assert!(c.iter().all(|p| p.precision == 1.0));
    assert_eq!(c.last().unwrap().recall, 0.6);
    assert!(pr_curve(&[], 3).is_empty());
    assert!(pr_curve(&all_tp, 0).is_empty());

    let perfect = pr_curve(&all_tp, 3);
    assert_eq!(average_precision(&perfect, ApMethod::Continuous), 1.0);
    assert_eq!(average_precision(&perfect, ApMethod::ElevenPoint), 1.0);
}

#[test]
fn mean_ap_examples() {
    assert!((mean_ap(&[0.8, 0.6]).unwrap() - 0.7).abs() < 1e-15);
    assert_eq!(mean_ap(&[0.42]).unwrap(), 0.42);
    assert!(mean_ap(&[]).is_err());
}

/// AP recomputed rank by rank: continuous AP adds, for each true positive,
/// 1/G times the best precision at that rank or any later one; eleven-point
/// AP scans the recall grid against every rank.
fn ap_oracle(tp: &[bool], total: usize, method: ApMethod) -> f64 {
    let n = tp.len();
    let mut prec = vec![0.0; n];
    let mut rec = vec![0.0; n];
    let mut hits = 0;
    for k in 0..n {
        if tp[k] {
            hits += 1;
        }
        prec[k] = hits as f64 / (k + 1) as f64;
        rec[k] = hits as f64 / total as f64;
    }
    match method {
        ApMethod::Continuous => (0..n)
            .filter(|&k| tp[k])
            .map(|k| (k..n).map(|j| prec[j]).fold(0.0, f64::max) / total as f64)
            .sum(),
        ApMethod::ElevenPoint => {
            let mut s = 0.0;
            for i in 0..=10 {
                let mut best = 0.0f64;
                for k in 0..n {
                    if rec[k] >= i as f64 / 10.0 {
                        best = best.max(prec[k]);
                    }
                }
                s += best;
            }
            s / 11.0
        }
    }
}

#[test]
fn four_class_report_matches_rank_oracle() {
    let mut r = rng(40);
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for img in 0..6 {
        let id = format!("img{img}");
        for _ in 0..5 {
            let class = r.random_range(0..4);
            let (x, y) = (r.random_range(0.0..80.0), r.random_range(0.0..80.0));
            let b = [x, y, x + r.random_range(5.0..20.0), y + r.random_range(5.0..20.0)];
            gts.push(gt(&id, class, b));
            if r.random_bool(0.8) {
                let j = r.random_range(-3.0..3.0);
                preds.push(pred(&id, class, r.random_range(0.0..1.0), [b[0] + j, b[1], b[2] + j, b[3]]));
            }
            if r.random_bool(0.4) {
                preds.push(pred(&id, r.random_range(0..4), r.random_range(0.0..1.0), [x + 30.0, y, x + 40.0, y + 9.0]));
            }
        }
    }
    for method in [ApMethod::Continuous, ApMethod::ElevenPoint] {
        let cfg = EvalConfig { method, ..Default::default() };
        let report = evaluate(&preds, &gts, None, &cfg).unwrap();
        assert_eq!(report.classes.len(), 4);
        let mut sum = 0.0;
        for c in &report.classes {
            let p: Vec<PredRecord> = preds.iter().filter(|d| d.class_id == c.class_id).cloned().collect();
            let g: Vec<GtRecord> = gts.iter().filter(|d| d.class_id == c.class_id).cloned().collect();
            let tp = flags(&match_detections(&p, &g, &cfg));
            let want = ap_oracle(&tp, g.len(), method);
            assert!((c.ap - want).abs() < 1e-12, "class {} {:?}: {} vs {}", c.class_id, method, c.ap, want);
            sum += want;
        }
        assert!((report.map - sum / 4.0).abs() < 1e-12);
    }
}

#[test]
fn class_without_ground_truth_is_flagged() {
    let gts = [gt("a", 0, [0.0, 0.0, 5.0, 5.0])];
    let preds = [pred("a", 1, 0.9, [0.0, 0.0, 5.0, 5.0])];
    let r = evaluate(&preds, &gts, Some(&[0, 1]), &EvalConfig::default()).unwrap();
    assert!(r.classes[1].no_ground_truth);
    assert_eq!(r.classes[1].ap, 0.0);
    assert_eq!(r.map, 0.0);
}

fn arb_flags() -> impl Strategy<Value = (Vec<bool>, usize)> {
    proptest::collection::vec(any::<bool>(), 0..30).prop_flat_map(|v| {
        let hits = v.iter().filter(|&&b| b).count();
        (Just(v), hits.max(1)..hits + 5)
    })
}

fn matched(tp: &[bool]) -> Vec<Matched> {
    tp.iter().enumerate().map(|(i, &t)| Matched { score: 1.0 - i as f64 / 100.0, true_positive: t }).collect()
}

proptest! {
    #[test]
    fn ap_matches_oracle_and_is_bounded((tp, total) in arb_flags()) {
        for method in [ApMethod::Continuous, ApMethod::ElevenPoint] {
            let ap = average_precision(&pr_curve(&matched(&tp), total), method);
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert!((ap - ap_oracle(&tp, total, method)).abs() < 1e-12);
        }
    }

    #[test]
    fn trailing_false_positive_never_helps((tp, total) in arb_flags()) {
        let mut more = tp.clone();
        more.push(false);
        for method in [ApMethod::Continuous, ApMethod::ElevenPoint] {
            let a = average_precision(&pr_curve(&matched(&tp), total), method);
            let b = average_precision(&pr_curve(&matched(&more), total), method);
            prop_assert!(b <= a);
        }
    }

    #[test]
    fn ap_depends_only_on_ranking(seed in any::<u64>(), k in 0.1f64..5.0) {
        let mut r = rng(seed);
        let gts: Vec<GtRecord> = (0..6).map(|i| gt("a", 0, [i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0])).collect();
        let preds: Vec<PredRecord> = (0..10).map(|_| {
            let x = r.random_range(0.0..110.0);
            pred("a", 0, r.random_range(0.01..1.0), [x, 0.0, x + 10.0, 10.0])
        }).collect();
        let warped: Vec<PredRecord> = preds.iter().map(|p| PredRecord { score: (k * p.score).exp() * 3.0, ..p.clone() }).collect();
        let cfg = EvalConfig::default();
        let a = evaluate(&preds, &gts, None, &cfg).unwrap().map;
        let b = evaluate(&warped, &gts, None, &cfg).unwrap().map;
        prop_assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn duplicates_of_matched_gt_are_false_positives(n in 2usize..6) {
        let g = [gt("a", 0, [0.0, 0.0, 10.0, 10.0])];
        let preds: Vec<PredRecord> = (0..n).map(|i| pred("a", 0, 0.9 - i as f64 * 0.1, [0.0, 0.0, 10.0, 10.0])).collect();
        let f = flags(&match_detections(&preds, &g, &EvalConfig::default()));
        prop_assert!(f[0]);
        prop_assert!(f[1..].iter().all(|t| !t));
    }
}
