use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn bx(x: f64, y: f64, class: usize, score: f64) -> Box3D {
    Box3D {
        center: [x, y, 0.0],
        size: [2.0, 4.0, 1.5],
        yaw: 0.3,
        velocity: [1.0, 0.0],
        class,
        score,
    }
}

fn det(sample: &str, b: Box3D) -> DetectionRecord {
    DetectionRecord {
        sample: sample.into(),
        det: b,
        attribute: None,
    }
}

fn gt(sample: &str, b: Box3D) -> GroundTruthRecord {
    GroundTruthRecord {
        sample: sample.into(),
        gt: b,
        attribute: None,
    }
}

fn matched(preds: &[DetectionRecord], gts: &[GroundTruthRecord], th: f64) -> ClassMatch {
    let p: Vec<&DetectionRecord> = preds.iter().collect();
    let order = sort_order(&p);
    let sorted: Vec<&DetectionRecord> = order.into_iter().map(|i| p[i]).collect();
    let g: Vec<&GroundTruthRecord> = gts.iter().collect();
    match_by_center_distance(&sorted, &g, th)
}

#[test]
fn greedy_matching_examples() {
    let g = [gt("s", bx(0.0, 0.0, 0, 1.0))];
    let m = matched(&[det("s", bx(0.0, 0.0, 0, 0.9))], &g, 2.0);
    assert_eq!(m.tp, [true]);
    let m = matched(&[det("s", bx(3.0, 0.0, 0, 0.9))], &g, 2.0);
    assert_eq!((m.tp.as_slice(), m.false_negatives), (&[false][..], 1));
    let m = matched(&[det("s", bx(0.1, 0.0, 0, 0.4)), det("s", bx(0.5, 0.0, 0, 0.8))], &g, 2.0);
    // Sorted order puts the 0.8 prediction first; it wins despite being farther.
    assert_eq!(m.tp, [true, false]);
    assert_eq!(m.pairs, [(0, 0)]);
}

#[test]
fn matching_stays_within_a_sample() {
    let g = [gt("a", bx(0.0, 0.0, 0, 1.0))];
    let m = matched(&[det("b", bx(0.0, 0.0, 0, 0.9))], &g, 2.0);
    assert_eq!(m.tp, [false]);
}

/// Precision at recall `r` read off the piecewise-linear PR curve by a
/// linear scan.
fn pr_oracle(tp: &[bool], npos: usize) -> f64 {
    let mut pts = Vec::new();
    let (mut a, mut b) = (0usize, 0usize);
    for &t in tp {
        if t {
            a += 1
        } else {
            b += 1
        }
        pts.push((a as f64 / npos as f64, a as f64 / (a + b) as f64));
    }
    let at = |r: f64| -> f64 {
        if r < pts[0].0 {
            return pts[0].1;
        }
        let last = pts[pts.len() - 1];
        if r > last.0 {
            return 0.0;
        }
        let mut val = last.1;
        for w in pts.windows(2).rev() {
            if w[0].0 <= r && r < w[1].0 {
                val = w[0].1 + (r - w[0].0) / (w[1].0 - w[0].0) * (w[1].1 - w[0].1);
                break;
            }
        }
        val
    };
    let mut acc = 0.0;
    for i in 11..=100 {
        acc += (at(i as f64 / 100.0) - 0.1).max(0.0);
    }
    (acc / 90.0 / 0.9).min(1.0)
}

#[test]
fn ap_examples() {
    assert_eq!(average_precision(&[true, true], 2, 0.1, 0.1), 1.0);
    assert_eq!(average_precision(&[], 2, 0.1, 0.1), 0.0);
    assert_eq!(average_precision(&[true], 0, 0.1, 0.1), 0.0);
    let tp = [true, false, true];
    let ap = average_precision(&tp, 2, 0.1, 0.1);
    assert!((ap - pr_oracle(&tp, 2)).abs() < 1e-12);
    // Precision is 1 below recall 0.5; from there it runs linearly from the
    // FP point (0.5, 1/2) to (1, 2/3).
    let closed = (11..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            let p = if r < 0.5 { 1.0 } else { 0.5 + (r - 0.5) / 3.0 };
            p - 0.1
        })
        .sum::<f64>()
        / 90.0
        / 0.9;
    assert!((ap - closed).abs() < 1e-12);
}

proptest! {
    #[test]
    fn ap_matches_the_scan_oracle(tp in proptest::collection::vec(any::<bool>(), 1..30), extra in 0usize..5) {
        let npos = tp.iter().filter(|t| **t).count() + extra;
        prop_assume!(npos > 0);
        let ap = average_precision(&tp, npos, 0.1, 0.1);
        prop_assert!((ap - pr_oracle(&tp, npos)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn dropping_a_false_positive_never_lowers_ap(tp in proptest::collection::vec(any::<bool>(), 1..30), pick in 0usize..30) {
        let npos = tp.iter().filter(|t| **t).count().max(1);
        let fps: Vec<usize> = (0..tp.len()).filter(|&i| !tp[i]).collect();
        prop_assume!(!fps.is_empty());
        let mut fewer = tp.clone();
        fewer.remove(fps[pick % fps.len()]);
        prop_assert!(average_precision(&fewer, npos, 0.1, 0.1) >= average_precision(&tp, npos, 0.1, 0.1) - 1e-12);
    }
}

#[test]
fn tp_error_examples() {
    let g = gt("s", bx(0.0, 0.0, 0, 1.0));
    let same = det("s", bx(0.0, 0.0, 0, 0.9));
    let e = tp_errors(&[(&same, &g)], 0.0);
    assert_eq!(e.as_array(), [0.0; 5]);
    let off = det("s", bx(0.3, 0.4, 0, 0.9));
    assert!((tp_errors(&[(&off, &g)], 0.0).ate - 0.5).abs() < 1e-12);
    let mut turned = same.clone();
    turned.det.yaw = g.gt.yaw + 1.5 * PI;
    assert!((tp_errors(&[(&turned, &g)], 0.0).aoe - PI / 2.0).abs() < 1e-12);
    assert_eq!(tp_errors(&[], 0.0), TpErrors::WORST);
}

#[test]
fn scale_error_is_one_minus_aligned_iou() {
    let a = bx(0.0, 0.0, 0, 1.0);
    let mut b = a.clone();
    b.size = [1.0, 4.0, 1.5];
    // Intersection is b itself: IoU = 6 / 12.
    assert!((scale_error(&a, &b) - 0.5).abs() < 1e-15);
}

#[test]
fn attributes_drive_aae() {
    let mut g = gt("s", bx(0.0, 0.0, 0, 1.0));
    g.attribute = Some("moving".into());
    let mut p = det("s", bx(0.0, 0.0, 0, 1.0));
    assert_eq!(tp_errors(&[(&p, &g)], 0.0).aae, 1.0);
    p.attribute = Some("moving".into());
    assert_eq!(tp_errors(&[(&p, &g)], 0.0).aae, 0.0);
}

#[test]
fn nds_reproduces_published_scores() {
    let rows = [
        (0.606, [0.334, 0.258, 0.288, 0.283, 0.193], 0.667),
        (0.613, [0.333, 0.256, 0.287, 0.281, 0.191], 0.672),
        (0.349, [0.716, 0.268, 0.379, 0.842, 0.200], 0.434),
    ];
    for (map, e, want) in rows {
        assert!((nds(map, &e) - want).abs() <= 1e-3, "{} vs {want}", nds(map, &e));
    }
}

#[test]
fn nds_is_linear_and_clamped() {
    let e = [0.2, 0.4, 1.0, 2.0, 0.0];
    assert!((nds(0.8, &e) - nds(0.2, &e) - 0.5 * 0.6).abs() < 1e-15);
    assert_eq!(nds(0.0, &[1.0; 5]), 0.0);
    assert_eq!(nds(0.0, &[2.0; 5]), 0.0);
    assert_eq!(nds(1.0, &[0.0; 5]), 1.0);
}

fn scene_set(seed: u64, objects: usize) -> (Vec<DetectionRecord>, Vec<GroundTruthRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for k in 0..objects {
        let s = format!("s{}", k % 5);
        let class = rng.random_range(0..4);
        let mut b = bx(rng.random_range(-45.0..45.0), rng.random_range(-45.0..45.0), class, 1.0);
        b.size = [rng.random_range(0.5..3.0), rng.random_range(0.5..7.0), 1.5];
        gts.push(gt(&s, b.clone()));
        if rng.random_bool(0.8) {
            let mut p = b.clone();
            p.center[0] += rng.random_range(-1.5..1.5);
            p.center[1] += rng.random_range(-1.5..1.5);
            p.yaw += rng.random_range(-0.5..0.5);
            p.score = rng.random_range(0.05..1.0);
            preds.push(det(&s, p));
        }
        if rng.random_bool(0.3) {
            let p = bx(rng.random_range(-45.0..45.0), rng.random_range(-45.0..45.0), class, rng.random_range(0.0..1.0));
            preds.push(det(&s, p));
        }
    }
    (preds, gts)
}

/// Independent evaluation: quadratic scans, no shared helpers beyond the
/// scan-based AP oracle.
fn oracle_map(preds: &[DetectionRecord], gts: &[GroundTruthRecord], ths: &[f64]) -> f64 {
    let mut aps = Vec::new();
    for class in 0..CLASS_NAMES.len() {
        let g: Vec<&GroundTruthRecord> = gts.iter().filter(|g| g.gt.class == class).collect();
        if g.is_empty() {
            continue;
        }
        let mut p: Vec<(usize, &DetectionRecord)> = preds.iter().enumerate().filter(|(_, p)| p.det.class == class).collect();
        p.sort_by(|a, b| {
            b.1.det
                .score
                .partial_cmp(&a.1.det.score)
                .unwrap()
                .then(a.1.sample.cmp(&b.1.sample))
                .then(a.0.cmp(&b.0))
        });
        for &th in ths {
            let mut used = vec![false; g.len()];
            let mut tp = Vec::new();
            for (_, d) in &p {
                let mut best = None;
                let mut best_d = f64::INFINITY;
                for (j, t) in g.iter().enumerate() {
                    let dist = ((d.det.center[0] - t.gt.center[0]).powi(2) + (d.det.center[1] - t.gt.center[1]).powi(2)).sqrt();
                    if !used[j] && t.sample == d.sample && dist < best_d {
                        best_d = dist;
                        best = Some(j);
                    }
                }
                let hit = best.filter(|_| best_d < th);
                if let Some(j) = hit {
                    used[j] = true;
                }
                tp.push(hit.is_some());
            }
            aps.push(if tp.is_empty() { 0.0 } else { pr_oracle(&tp, g.len()) });
        }
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

#[test]
fn map_agrees_with_an_independent_implementation() {
    let cfg = EvalConfig::default();
    for seed in 0..4 {
        let (p, g) = scene_set(seed, 50);
        let r = evaluate(&p, &g, &cfg).unwrap();
        let want = oracle_map(&p, &g, &cfg.thresholds);
        assert!((r.map - want).abs() < 1e-9, "{} vs {want}", r.map);
        assert!((r.nds - nds(r.map, &r.tp_means())).abs() < 1e-15);
    }
}

#[test]
fn perfect_and_empty_predictions() {
    let (_, g) = scene_set(9, 30);
    let p: Vec<DetectionRecord> = g.iter().map(|g| det(&g.sample, g.gt.clone())).collect();
    let r = evaluate(&p, &g, &EvalConfig::default()).unwrap();
    assert_eq!(r.map, 1.0);
    assert_eq!(r.tp_means(), [0.0; 5]);
    assert_eq!(r.nds, 1.0);
    let e = evaluate(&[], &g, &EvalConfig::default()).unwrap();
    assert_eq!(e.map, 0.0);
    assert_eq!(e.tp_means(), [1.0; 5]);
    assert_eq!(e.nds, 0.0);
}

#[test]
fn prediction_order_does_not_matter() {
    let (mut p, g) = scene_set(12, 40);
    let cfg = EvalConfig::default().with_bins();
    let a = evaluate(&p, &g, &cfg).unwrap();
    p.reverse();
    let b = evaluate(&p, &g, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_prediction_class_is_an_input_error() {
    let (_, g) = scene_set(1, 5);
    let cfg = EvalConfig {
        classes: vec!["car".into(), "truck".into(), "construction_vehicle".into(), "bus".into()],
        ..EvalConfig::default()
    };
    let p = [det("s0", bx(0.0, 0.0, 8, 0.5))];
    match evaluate(&p, &g, &cfg) {
        Err(Error::Input(msg)) => assert!(msg.contains("pedestrian"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn bins_follow_distance_and_size() {
    let mut near = gt("s", bx(10.0, 0.0, 0, 1.0));
    near.gt.size = [1.8, 3.9, 1.5];
    let mut long = gt("s", bx(25.0, 0.0, 0, 1.0));
    long.gt.size = [2.0, 5.0, 1.5];
    let g = [near.clone(), long.clone()];
    let p = [det("s", near.gt.clone())];
    let cfg = EvalConfig::default();
    let by_d = binned_map(&p, &g, &cfg, &default_distance_bins(), Box3D::ego_distance).unwrap();
    assert_eq!(by_d[0].map, 1.0);
    assert_eq!(by_d[1].map, 0.0);
    assert_eq!((by_d[0].num_gt, by_d[1].num_gt, by_d[2].num_gt), (1, 1, 0));
    let by_s = binned_map(&p, &g, &cfg, &default_size_bins(), Box3D::longest_edge).unwrap();
    assert_eq!((by_s[0].num_gt, by_s[1].num_gt), (1, 1));
}

#[test]
fn binned_map_equals_filtered_evaluation() {
    // Objects sit well inside their bins and predictions stay within 1.5 m,
    // so filtering first cannot change any match.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for k in 0..40 {
        let r = [8.0, 25.0, 40.0][k % 3];
        let a = rng.random_range(0.0..2.0 * PI);
        let b = bx(r * a.cos(), r * a.sin(), k % 2, 1.0);
        gts.push(gt(&format!("s{k}"), b.clone()));
        if rng.random_bool(0.7) {
            let mut p = b.clone();
            p.center[0] += rng.random_range(-1.0..1.0);
            p.score = rng.random_range(0.0..1.0);
            preds.push(det(&format!("s{k}"), p));
        }
    }
    let cfg = EvalConfig::default();
    let bins = default_distance_bins();
    let table = binned_map(&preds, &gts, &cfg, &bins, Box3D::ego_distance).unwrap();
    for (row, bin) in table.iter().zip(&bins) {
        let g: Vec<_> = gts.iter().filter(|g| bin.contains(g.gt.ego_distance())).cloned().collect();
        let p: Vec<_> = preds.iter().filter(|p| bin.contains(p.det.ego_distance())).cloned().collect();
        let want = evaluate(&p, &g, &cfg).unwrap().map;
        assert!((row.map - want).abs() < 1e-12, "{}: {} vs {want}", bin.label(), row.map);
    }
}

#[test]
fn report_round_trips_through_json() {
    let (p, g) = scene_set(5, 20);
    let r = evaluate(&p, &g, &EvalConfig::default().with_bins()).unwrap();
    let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
    assert!(r.to_table().contains("NDS"));
}
