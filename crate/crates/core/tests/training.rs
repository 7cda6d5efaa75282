use oos_core::classifier::MlpClassifier;
use oos_core::data::{Dataset, LabelSpace, Utterance};
use oos_core::encoder::{Encoder, EncoderSpec, FeatureVector};
use oos_core::outliers::BatchRatio;
use oos_core::trainer::{train, train_with_scorer, TrainConfig};
use oos_core::Error;
use oos_testkit::fixtures::{far_pool, two_blob_split};

fn small_config(ratio: BatchRatio) -> TrainConfig {
    TrainConfig {
        ratio,
        hidden: vec![16],
        lr: 1e-2,
        max_epochs: 20,
        patience: 20,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn accuracy_on(model: &MlpClassifier, ds: &Dataset, ls: &LabelSpace) -> f64 {
    let feats: Vec<FeatureVector> = ds
        .utterances()
        .iter()
        .map(|u| Encoder::Identity { dim: 2 }.encode(u).unwrap())
        .collect();
    let golds = ls.indices_for(ds).unwrap();
    let preds = model.predict(&feats).unwrap();
    preds.iter().zip(&golds).filter(|(p, g)| p == g).count() as f64 / golds.len() as f64
}

#[test]
fn separable_blobs_are_learned_without_outliers() {
    let split = two_blob_split(100, 0);
    let cfg = small_config(BatchRatio::new(100, 0, 0).unwrap());
    let out = train(&cfg, &split, &[], &EncoderSpec::identity(2)).unwrap();
    assert!(accuracy_on(&out.model, &split.train, &split.label_space) >= 0.99);
    assert_eq!(out.model.num_outputs(), 3);
}

#[test]
fn patience_one_with_constant_score_stops_after_two_epochs() {
    let split = two_blob_split(40, 1);
    let cfg = TrainConfig {
        patience: 1,
        ..small_config(BatchRatio::new(20, 5, 10).unwrap())
    };
    let mut scorer = |_: &_, _: &_| Ok(-1.0);
    let out = train_with_scorer(
        &cfg,
        &split,
        &far_pool(30),
        Encoder::Identity { dim: 2 },
        &mut scorer,
    )
    .unwrap();
    assert_eq!(out.history.epochs.len(), 2);
    assert_eq!(out.history.best_epoch, 1);
    assert!(out.history.epochs[0].improved && !out.history.epochs[1].improved);
}

#[test]
fn best_epoch_weights_are_returned() {
    let split = two_blob_split(40, 2);
    let cfg = TrainConfig {
        patience: 3,
        ..small_config(BatchRatio::new(20, 5, 10).unwrap())
    };
    // Scores peak at epoch 2 and decline afterwards; the snapshot taken
    // inside the scorer at that epoch must be what comes back.
    let mut epoch = 0;
    let mut snapshot = None;
    let mut scorer = |m: &MlpClassifier, _: &Encoder| {
        epoch += 1;
        if epoch == 2 {
            snapshot = Some(m.clone());
        }
        Ok(if epoch == 2 { 0.0 } else { -(epoch as f64) })
    };
    let out = train_with_scorer(
        &cfg,
        &split,
        &far_pool(30),
        Encoder::Identity { dim: 2 },
        &mut scorer,
    )
    .unwrap();
    assert_eq!(out.history.best_epoch, 2);
    assert_eq!(out.history.epochs.len(), 5);
    assert_eq!(Some(out.model), snapshot);
}

#[test]
fn epoch_counts_follow_the_batch_ratio() {
    // 80 inliers in batches of 20: four full batches per epoch.
    let split = two_blob_split(40, 3);
    let cfg = TrainConfig {
        max_epochs: 3,
        ..small_config(BatchRatio::new(20, 5, 10).unwrap())
    };
    let out = train(&cfg, &split, &far_pool(30), &EncoderSpec::identity(2)).unwrap();
    for e in &out.history.epochs {
        assert_eq!(e.batches, 4);
        assert_eq!((e.inliers, e.open, e.synthetic), (80, 20, 40));
    }
}

#[test]
fn same_seed_reproduces_history_and_weights() {
    let split = two_blob_split(40, 4);
    let cfg = TrainConfig {
        max_epochs: 5,
        ..small_config(BatchRatio::new(16, 4, 8).unwrap())
    };
    let a = train(&cfg, &split, &far_pool(30), &EncoderSpec::identity(2)).unwrap();
    let b = train(&cfg, &split, &far_pool(30), &EncoderSpec::identity(2)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
    assert_eq!(a.history.to_jsonl(), b.history.to_jsonl());

    let c = train(
        &TrainConfig { seed: 4, ..cfg },
        &split,
        &far_pool(30),
        &EncoderSpec::identity(2),
    )
    .unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn non_finite_features_report_where_training_failed() {
    let mut split = two_blob_split(20, 5);
    let mut examples = split.train.examples.clone();
    examples[0].0 = Utterance::numeric("bad", vec![f64::INFINITY, 0.0]);
    split.train = Dataset::from_examples(examples).unwrap();
    let cfg = small_config(BatchRatio::new(100, 0, 0).unwrap());
    match train(&cfg, &split, &[], &EncoderSpec::identity(2)) {
        Err(e @ Error::NonFinite(_)) => {
            let msg = e.to_string();
            assert!(msg.contains("epoch 1") && msg.contains("batch 0"), "{msg}");
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn single_class_training_split_is_rejected() {
    let mut split = two_blob_split(20, 6);
    let only_a: Vec<(Utterance, String)> = split
        .train
        .examples
        .iter()
        .filter(|(_, l)| l == "a")
        .cloned()
        .collect();
    split.train = Dataset::from_examples(only_a).unwrap();
    let cfg = small_config(BatchRatio::new(10, 0, 0).unwrap());
    assert!(matches!(
        train(&cfg, &split, &[], &EncoderSpec::identity(2)),
        Err(Error::InvalidData(_))
    ));
}
