//! Central finite differences of the full batch loss, taken through the
//! trainable hashed-mean table, batch composition and the classifier head.

use oos_core::classifier::{Architecture, MlpClassifier};
use oos_core::data::Utterance;
use oos_core::encoder::{Encoder, HashedMeanEncoder};
use oos_core::outliers::{compose_batch, BatchRatio, EmbeddedExample, Provenance, TrainBatch};
use oos_core::rng;
use oos_core::trainer::backprop_to_encoder;
use rand::Rng;

const VOCAB: &[&str] = &[
    "book", "a", "flight", "to", "paris", "what", "is", "the", "weather", "today", "play", "some",
    "jazz", "transfer", "money", "from", "savings", "set", "an", "alarm",
];

/// One randomly drawn small training step.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub model: MlpClassifier,
    pub encoder: Encoder,
    pub inliers: Vec<Utterance>,
    pub labels: Vec<usize>,
    pub pool: Vec<Utterance>,
    pub ratio: BatchRatio,
    pub compose_seed: u64,
    pub detach_synthetic: bool,
}

fn sentence(r: &mut impl Rng) -> String {
    let n = r.random_range(1..=5);
    (0..n)
        .map(|_| VOCAB[r.random_range(0..VOCAB.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// A case with input dim <= 16, up to two hidden layers of width <= 32 and
/// K <= 5, with open and synthetic outliers in the batch.
pub fn random_case(seed: u64, detach_synthetic: bool) -> GradCase {
    let mut r = rng::stream(seed, 0x6ead);
    let dim = r.random_range(2..=16);
    let depth = r.random_range(0..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(2..=32)).collect();
    let k = r.random_range(2..=5);
    let temperature = r.random_range(0.1..1.0);
    let arch = Architecture {
        input_dim: dim,
        hidden,
        num_outputs: k + 1,
        temperature,
    };
    let mut model = MlpClassifier::new(arch, seed).expect("valid architecture");
    // Nonzero biases: with zero biases a unit whose inputs are all dead sits
    // exactly on the ReLU kink, where central differences average the two
    // one-sided slopes.
    for layer in model.layers_mut() {
        layer
            .bias
            .iter_mut()
            .for_each(|b| *b = r.random_range(-0.1..0.1));
    }
    // A wider table init than the trainer's keeps activations away from
    // ReLU kinks relative to the finite-difference step.
    let mut table_rng = rng::stream(seed, 0x7ab1e);
    let buckets = 1024;
    let table = (0..dim * buckets)
        .map(|_| table_rng.random_range(-1.0..1.0))
        .collect();
    let encoder = Encoder::HashedMean(
        HashedMeanEncoder::from_table(dim, buckets, true, table).expect("sized"),
    );
    let n = r.random_range(k..=8).max(2);
    let inliers: Vec<Utterance> = (0..n)
        .map(|i| Utterance::text(format!("in{i}"), sentence(&mut r)))
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let pool: Vec<Utterance> = (0..4)
        .map(|i| Utterance::text(format!("open{i}"), sentence(&mut r)))
        .collect();
    let ratio =
        BatchRatio::new(n, r.random_range(1..=4), r.random_range(1..=6)).expect("valid ratio");
    GradCase {
        model,
        encoder,
        inliers,
        labels,
        pool,
        ratio,
        compose_seed: seed,
        detach_synthetic,
    }
}

impl GradCase {
    pub fn num_known(&self) -> usize {
        self.model.num_outputs() - 1
    }

    pub fn batch(&self, encoder: &Encoder) -> TrainBatch {
        let feats = encoder.encode_batch(&self.inliers).expect("text encodes");
        let inliers: Vec<EmbeddedExample> = feats
            .into_iter()
            .zip(&self.labels)
            .map(|(f, &l)| EmbeddedExample::new(f, l))
            .collect();
        let pool = encoder.encode_batch(&self.pool).expect("text encodes");
        let mut r = rng::stream(self.compose_seed, rng::STREAM_COMPOSER);
        compose_batch(&inliers, &pool, &self.ratio, self.num_known(), &mut r).expect("composable")
    }

    /// Loss with the encoder perturbed. When synthetic outliers are detached
    /// they keep the features computed from the unperturbed table.
    fn loss_with(&self, model: &MlpClassifier, encoder: &Encoder, frozen: &TrainBatch) -> f64 {
        let mut batch = self.batch(encoder);
        if self.detach_synthetic {
            for (i, p) in frozen.provenance.iter().enumerate() {
                if matches!(p, Provenance::Synthetic { .. }) {
                    batch.examples[i] = frozen.examples[i].clone();
                }
            }
        }
        model.loss(&batch.examples).expect("finite loss")
    }

    /// Analytic head gradients (`W0, b0, ...`) and table gradient.
    pub fn analytic(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let batch = self.batch(&self.encoder);
        let out = self
            .model
            .loss_and_grad(&batch.examples)
            .expect("finite loss");
        let mut encoder = self.encoder.clone();
        backprop_to_encoder(
            &mut encoder,
            &self.inliers,
            &self.pool,
            &batch,
            &out.input_grads,
            self.detach_synthetic,
        )
        .expect("aligned gradients");
        let head = out
            .grads
            .slices()
            .into_iter()
            .map(<[f64]>::to_vec)
            .collect();
        let table = match &encoder {
            Encoder::HashedMean(h) => h.grad().to_vec(),
            _ => unreachable!("cases use a hashed-mean encoder"),
        };
        (head, table)
    }

    /// Table entries the batch can influence: every row of a bucket hit by
    /// an inlier or pool token.
    pub fn touched_table_entries(&self) -> Vec<usize> {
        let Encoder::HashedMean(h) = &self.encoder else {
            unreachable!("cases use a hashed-mean encoder")
        };
        let dim = self.encoder.dim();
        let mut rows: Vec<usize> = self
            .inliers
            .iter()
            .chain(&self.pool)
            .flat_map(|u| match &u.content {
                oos_core::data::Content::Text(t) => oos_core::encoder::tokenize(t),
                _ => Vec::new(),
            })
            .map(|t| h.bucket(&t))
            .collect();
        rows.sort_unstable();
        rows.dedup();
        rows.into_iter()
            .flat_map(|b| b * dim..(b + 1) * dim)
            .collect()
    }
}

/// `||a - n|| / (||a|| + ||n||)`, or 0 when both are (numerically) zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    /// Worst relative error over the head's parameter tensors.
    pub head: f64,
    pub table: f64,
    pub entries_checked: usize,
}

/// Compares analytic gradients with central differences of step `h`.
pub fn check(case: &GradCase, h: f64) -> GradReport {
    let (head, table) = case.analytic();
    let frozen = case.batch(&case.encoder);
    let mut checked = 0;

    let mut head_err: f64 = 0.0;
    for (t, analytic) in head.iter().enumerate() {
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|j| {
                let mut plus = case.model.clone();
                plus.params_mut()[t][j] += h;
                let mut minus = case.model.clone();
                minus.params_mut()[t][j] -= h;
                (case.loss_with(&plus, &case.encoder, &frozen)
                    - case.loss_with(&minus, &case.encoder, &frozen))
                    / (2.0 * h)
            })
            .collect();
        checked += numeric.len();
        head_err = head_err.max(relative_error(analytic, &numeric));
    }

    let entries = case.touched_table_entries();
    let perturbed = |idx: usize, delta: f64| {
        let mut e = case.encoder.clone();
        if let Encoder::HashedMean(hm) = &mut e {
            hm.table_mut()[idx] += delta;
        }
        e
    };
    let numeric: Vec<f64> = entries
        .iter()
        .map(|&idx| {
            (case.loss_with(&case.model, &perturbed(idx, h), &frozen)
                - case.loss_with(&case.model, &perturbed(idx, -h), &frozen))
                / (2.0 * h)
        })
        .collect();
    let analytic: Vec<f64> = entries.iter().map(|&i| table[i]).collect();
    checked += entries.len();
    // Entries outside the touched rows must have exactly zero gradient.
    let touched: std::collections::HashSet<usize> = entries.iter().copied().collect();
    let stray = table
        .iter()
        .enumerate()
        .any(|(i, &g)| g != 0.0 && !touched.contains(&i));
    let table_err = if stray {
        f64::INFINITY
    } else {
        relative_error(&analytic, &numeric)
    };

    GradReport {
        head: head_err,
        table: table_err,
        entries_checked: checked,
    }
}
