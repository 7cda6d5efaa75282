//! Brute-force metrics: expand a confusion matrix into individual
//! (gold, prediction) pairs and count TP/FP/FN per class by scanning them.

pub struct OracleMetrics {
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub macro_f1_all: f64,
    pub macro_f1_known: f64,
    pub f1_unknown: f64,
}

pub fn brute_force(counts: &[Vec<u64>]) -> OracleMetrics {
    let n = counts.len();
    let mut pairs = Vec::new();
    for (g, row) in counts.iter().enumerate() {
        for (p, &c) in row.iter().enumerate() {
            for _ in 0..c {
                pairs.push((g, p));
            }
        }
    }
    let per_class_f1: Vec<f64> = (0..n)
        .map(|c| {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for &(g, p) in &pairs {
                match (g == c, p == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            if tp == 0 {
                0.0
            } else {
                (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
            }
        })
        .collect();
    let correct = pairs.iter().filter(|(g, p)| g == p).count();
    OracleMetrics {
        accuracy: correct as f64 / pairs.len() as f64,
        macro_f1_all: per_class_f1.iter().sum::<f64>() / n as f64,
        macro_f1_known: per_class_f1[..n - 1].iter().sum::<f64>() / (n - 1) as f64,
        f1_unknown: per_class_f1[n - 1],
        per_class_f1,
    }
}
