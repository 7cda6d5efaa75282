//! Small hand-built splits for training tests.

use oos_core::data::{Dataset, LabelSpace, SplitResult, TestExample, Utterance};
use oos_core::rng;
use rand::Rng;

/// Two well separated 2-D classes `a` and `b` with `n` training examples
/// each, `n / 5` validation examples each, and ten test points from a
/// held-out class between them.
pub fn two_blob_split(n: usize, seed: u64) -> SplitResult {
    let mut r = rng::stream(seed, 77);
    let mut point = |c: f64| {
        vec![
            c + r.random_range(-0.2..0.2),
            -c + r.random_range(-0.2..0.2),
        ]
    };
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..n {
        train.push((
            Utterance::numeric(format!("a{i}"), point(-1.0)),
            "a".to_string(),
        ));
        train.push((
            Utterance::numeric(format!("b{i}"), point(1.0)),
            "b".to_string(),
        ));
    }
    for i in 0..n / 5 {
        val.push((
            Utterance::numeric(format!("va{i}"), point(-1.0)),
            "a".to_string(),
        ));
        val.push((
            Utterance::numeric(format!("vb{i}"), point(1.0)),
            "b".to_string(),
        ));
    }
    let test = (0..10)
        .map(|i| TestExample {
            utterance: Utterance::numeric(format!("t{i}"), point(0.0)),
            source_label: "c".into(),
            target: 2,
        })
        .collect();
    SplitResult {
        train: Dataset::from_examples(train).expect("unique ids"),
        validation: Dataset::from_examples(val).expect("unique ids"),
        test,
        label_space: LabelSpace::new(vec!["a".into(), "b".into()]).expect("distinct names"),
    }
}

/// A numeric open pool far from both classes.
pub fn far_pool(n: usize) -> Vec<Utterance> {
    (0..n)
        .map(|i| Utterance::numeric(format!("p{i}"), vec![5.0 + (i % 7) as f64 * 0.1, 5.0]))
        .collect()
}
