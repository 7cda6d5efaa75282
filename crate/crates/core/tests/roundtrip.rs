use oos_core::baselines::MspModel;
use oos_core::checkpoint::Checkpoint;
use oos_core::classifier::{Architecture, MlpClassifier};
use oos_core::data::{LabelSpace, Utterance};
use oos_core::encoder::{Encoder, EncoderSpec};
use oos_core::oose::{self, EmbeddingMatrix, RowEntry};
use oos_core::outliers::BatchRatio;
use oos_core::rng;
use oos_core::trainer::{train, TrainConfig};
use oos_testkit::fixtures::{far_pool, two_blob_split};
use rand::Rng;

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn embedding_file_round_trips_bit_exactly() {
    let mut r = rng::stream(1, 0);
    let mut values: Vec<f32> = (0..7 * 5).map(|_| r.random_range(-1e3f32..1e3)).collect();
    values[3] = f32::MIN_POSITIVE / 4.0;
    values[4] = -0.0;
    let matrix = EmbeddingMatrix { dim: 5, values };
    let rows: Vec<RowEntry> = (0..7)
        .map(|i| RowEntry {
            row: i,
            id: format!("u{i}"),
            label: (i % 2 == 0).then(|| "x".to_string()),
        })
        .collect();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.oose");
    oose::write(&path, &matrix, &rows).unwrap();
    let (back, back_rows) = oose::read(&path).unwrap();
    let as_bits = |m: &EmbeddingMatrix| m.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(back.dim, 5);
    assert_eq!(as_bits(&back), as_bits(&matrix));
    assert_eq!(back_rows, rows);
    assert_eq!(oose::encode(&back), std::fs::read(&path).unwrap());

    let mut bad = oose::encode(&matrix);
    bad[0] = b'X';
    assert!(oose::decode(&bad).is_err());
    assert!(oose::decode(&oose::encode(&matrix)[..20]).is_err());
}

fn random_model(seed: u64) -> MlpClassifier {
    let arch = Architecture {
        input_dim: 6,
        hidden: vec![5, 4],
        num_outputs: 4,
        temperature: 0.1,
    };
    let mut m = MlpClassifier::new(arch, seed).unwrap();
    let mut r = rng::stream(seed, 1);
    for layer in m.layers_mut() {
        layer
            .bias
            .iter_mut()
            .for_each(|b| *b = r.random_range(-1.0..1.0));
    }
    m
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let ls = LabelSpace::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
    let encoder = Encoder::build(&EncoderSpec::hashed_mean(6, 1024, true), 4).unwrap();
    let ours = Checkpoint::ours(&random_model(1), &ls, &encoder, 4);

    let msp_model = MspModel::new(random_model(2), 0.35).unwrap();
    let k_way_ls = LabelSpace::new(vec!["a".into(), "b".into(), "c".into(), "d".into()]).unwrap();
    let msp = Checkpoint::msp(&msp_model, &k_way_ls, &encoder, 4);

    let dir = tempfile::tempdir().unwrap();
    for (name, ckpt) in [("ours.oosm", &ours), ("msp.oosm", &msp)] {
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(&back, ckpt);
        for (a, b) in back.model.params().iter().zip(ckpt.model.params()) {
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(
            bits(back.encoder_table.as_ref().unwrap()),
            bits(ckpt.encoder_table.as_ref().unwrap())
        );

        let path = dir.path().join(name);
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), *ckpt);
        assert_eq!(std::fs::read(&path).unwrap(), ckpt.to_bytes());
    }
    assert_eq!(msp.threshold, Some(0.35));

    let mut bad = ours.to_bytes();
    bad[..4].copy_from_slice(b"NOPE");
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let truncated = ours.to_bytes();
    assert!(Checkpoint::from_bytes(&truncated[..truncated.len() - 1]).is_err());
}

#[test]
fn restored_checkpoint_predicts_like_the_trained_model() {
    let split = two_blob_split(40, 8);
    let cfg = TrainConfig {
        ratio: BatchRatio::new(20, 5, 10).unwrap(),
        hidden: vec![8],
        lr: 1e-2,
        max_epochs: 5,
        seed: 11,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &split, &far_pool(20), &EncoderSpec::identity(2)).unwrap();
    let ckpt = Checkpoint::ours(&out.model, &split.label_space, &out.encoder, cfg.seed);
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    let utts: Vec<Utterance> = split.test.iter().map(|t| t.utterance.clone()).collect();
    let feats = back.encoder().unwrap().encode_batch(&utts).unwrap();
    assert_eq!(
        back.predictor().unwrap().predict(&feats).unwrap(),
        out.model.predict(&feats).unwrap()
    );

    let again = train(&cfg, &split, &far_pool(20), &EncoderSpec::identity(2)).unwrap();
    let again = Checkpoint::ours(&again.model, &split.label_space, &again.encoder, cfg.seed);
    assert_eq!(again.to_bytes(), ckpt.to_bytes());
}
