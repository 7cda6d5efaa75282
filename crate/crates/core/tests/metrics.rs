use oos_core::evaluation::{compute_metrics, confusion, ConfusionMatrix};
use oos_core::rng;
use oos_testkit::metrics::brute_force;
use rand::Rng;

#[test]
fn agrees_with_brute_force_on_random_matrices() {
    let mut r = rng::stream(2024, 0);
    for case in 0..100 {
        let k = r.random_range(1..=6);
        let mut cm = ConfusionMatrix::zeros(k);
        for row in cm.counts.iter_mut() {
            for c in row.iter_mut() {
                // Sparse entries so some classes go unpredicted or absent.
                *c = if r.random_bool(0.3) {
                    0
                } else {
                    r.random_range(0..20)
                };
            }
        }
        if cm.total() == 0 {
            cm.counts[0][0] = 1;
        }
        let m = compute_metrics(&cm).unwrap();
        let o = brute_force(&cm.counts);
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(m.accuracy, o.accuracy), "case {case}");
        assert!(close(m.macro_f1_all, o.macro_f1_all), "case {case}");
        assert!(close(m.macro_f1_known, o.macro_f1_known), "case {case}");
        assert!(close(m.f1_unknown, o.f1_unknown), "case {case}");
        for (a, b) in m.per_class_f1.iter().zip(&o.per_class_f1) {
            assert!(close(*a, *b), "case {case}");
        }
    }
}

#[test]
fn uniform_two_by_two_scores_one_half() {
    let cm = ConfusionMatrix {
        counts: vec![vec![1, 1], vec![1, 1]],
    };
    let m = compute_metrics(&cm).unwrap();
    assert_eq!(m.accuracy, 0.5);
    assert_eq!(m.per_class_f1, vec![0.5, 0.5]);
    assert_eq!(
        (m.macro_f1_all, m.macro_f1_known, m.f1_unknown),
        (0.5, 0.5, 0.5)
    );
}

#[test]
fn constant_out_of_scope_predictor() {
    // 70 inliers over K = 3 and 30 out-of-scope; everything predicted K.
    let golds: Vec<usize> = (0..100).map(|i| if i < 30 { 3 } else { i % 3 }).collect();
    let preds = vec![3; 100];
    let m = compute_metrics(&confusion(&preds, &golds, 3).unwrap()).unwrap();
    assert!((m.accuracy - 0.30).abs() < 1e-12);
    // P = 0.3, R = 1: F1 = 0.6 / 1.3.
    assert!((m.f1_unknown - 6.0 / 13.0).abs() < 1e-12);
    assert_eq!(m.macro_f1_known, 0.0);
}

#[test]
fn confusion_matches_a_naive_recount() {
    let mut r = rng::stream(5, 0);
    let k = 4;
    let preds: Vec<usize> = (0..500).map(|_| r.random_range(0..=k)).collect();
    let golds: Vec<usize> = (0..500).map(|_| r.random_range(0..=k)).collect();
    let cm = confusion(&preds, &golds, k).unwrap();
    for g in 0..=k {
        for p in 0..=k {
            let n = preds
                .iter()
                .zip(&golds)
                .filter(|&(&pp, &gg)| pp == p && gg == g)
                .count() as u64;
            assert_eq!(cm.counts[g][p], n);
        }
    }
    assert!(confusion(&[5], &[0], k).is_err());
    assert!(confusion(&[0, 1], &[0], k).is_err());
}
