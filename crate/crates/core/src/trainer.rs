//! The end-to-end training loop: encode inliers, compose each mini-batch
//! with fresh pseudo outliers, take an Adam step on the classifier (and the
//! encoder table when it is trainable), score on validation after every
//! epoch, and keep the best epoch's weights.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    adam_step, Architecture, MlpClassifier, DEFAULT_HIDDEN, DEFAULT_TEMPERATURE,
};
use crate::data::{Dataset, LabelSpace, SplitResult, Utterance};
use crate::encoder::{Encoder, EncoderSpec, FeatureVector};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::outliers::{self, BatchRatio, EmbeddedExample, Provenance, TrainBatch};
use crate::rng;

/// Minimum absolute gain in validation score that counts as an improvement.
pub const IMPROVEMENT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParentSource {
    /// Synthetic parents are the current batch's inliers.
    Batch,
    /// Synthetic parents are drawn from the whole training set.
    TrainingSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub ratio: BatchRatio,
    pub hidden: Vec<usize>,
    pub temperature: f64,
    pub lr: f64,
    pub encoder_lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub synthetic_parents: ParentSource,
    /// When false, loss gradients flow through synthetic outliers into the
    /// encodings of their parents.
    pub detach_synthetic: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ratio: BatchRatio::default(),
            hidden: DEFAULT_HIDDEN.to_vec(),
            temperature: DEFAULT_TEMPERATURE,
            lr: 1e-4,
            encoder_lr: 1e-3,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            synthetic_parents: ParentSource::Batch,
            detach_synthetic: true,
            trace_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.ratio.validate()?;
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("encoder_lr", self.encoder_lr),
            ("temperature", self.temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.detach_synthetic && self.synthetic_parents == ParentSource::TrainingSet {
            return Err(Error::Config(
                "attached synthetic gradients need batch parents".into(),
            ));
        }
        Ok(())
    }

    /// Synthetic outliers per inlier, used to size validation augmentation.
    pub fn synthetic_per_inlier(&self) -> f64 {
        self.ratio.synthetic as f64 / self.ratio.inliers as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_score: f64,
    pub batches: usize,
    pub inliers: usize,
    pub open: usize,
    pub synthetic: usize,
    pub improved: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("serializable") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: MlpClassifier,
    pub encoder: Encoder,
    pub history: TrainHistory,
}

/// Negative mean cross-entropy on validation inliers plus synthetic outliers
/// (label K) built from validation features under a fixed seed, so every
/// epoch of a run is scored against the same pseudo outliers. Higher is better.
pub fn validation_score(
    model: &MlpClassifier,
    encoder: &Encoder,
    validation: &Dataset,
    label_space: &LabelSpace,
    synthetic_per_inlier: f64,
    seed: u64,
) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::InvalidData("validation set is empty".into()));
    }
    let features = encoder.encode_batch(&validation.utterances())?;
    let labels = label_space.indices_for(validation)?;
    score_features(
        model,
        &features,
        &labels,
        label_space.oos_index,
        synthetic_per_inlier,
        seed,
    )
}

pub(crate) fn score_features(
    model: &MlpClassifier,
    features: &[FeatureVector],
    labels: &[usize],
    oos_label: usize,
    synthetic_per_inlier: f64,
    seed: u64,
) -> Result<f64> {
    let mut examples: Vec<EmbeddedExample> = features
        .iter()
        .zip(labels)
        .map(|(f, &l)| EmbeddedExample::new(f.clone(), l))
        .collect();
    let m = (features.len() as f64 * synthetic_per_inlier).round() as usize;
    if m > 0 && model.num_outputs() > oos_label {
        let mut by_class: BTreeMap<usize, Vec<FeatureVector>> = BTreeMap::new();
        for (f, &l) in features.iter().zip(labels) {
            by_class.entry(l).or_default().push(f.clone());
        }
        let mut r = rng::stream(seed, rng::STREAM_VALIDATION);
        for s in outliers::synthesize_outliers(&by_class, m, &mut r)? {
            examples.push(EmbeddedExample::new(s, oos_label));
        }
    }
    Ok(-model.loss(&examples)?)
}

/// Inputs of one training run after encoding has been set up.
struct Fit<'a> {
    config: &'a TrainConfig,
    ratio: BatchRatio,
    train: Vec<Utterance>,
    labels: Vec<usize>,
    pool: &'a [Utterance],
    oos_label: usize,
}

fn distinct_labels(batch: &[EmbeddedExample]) -> usize {
    let mut seen: Vec<usize> = batch.iter().map(|e| e.label).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Resets the encoder's gradient and accumulates dLoss/dTable for one batch.
///
/// `inliers` are the batch's inlier utterances (in batch order) and `pool`
/// the open-domain pool the batch's open examples index into. Synthetic
/// outliers pass their gradient to their parents with weights `1 - theta`
/// and `theta` unless `detach_synthetic` is set.
pub fn backprop_to_encoder(
    encoder: &mut Encoder,
    inliers: &[Utterance],
    pool: &[Utterance],
    batch: &TrainBatch,
    input_grads: &[FeatureVector],
    detach_synthetic: bool,
) -> Result<()> {
    if input_grads.len() != batch.examples.len() || inliers.len() != batch.counts.inliers {
        return Err(Error::InvalidData(
            "gradients do not line up with the batch".into(),
        ));
    }
    let mut utts = inliers.to_vec();
    let mut upstream: Vec<FeatureVector> = input_grads[..inliers.len()].to_vec();
    for (p, g) in batch.provenance.iter().zip(input_grads) {
        match *p {
            Provenance::Inlier { .. } => {}
            Provenance::Open { pool_index } => {
                utts.push(pool[pool_index].clone());
                upstream.push(g.clone());
            }
            Provenance::Synthetic { alpha, beta, theta } => {
                if detach_synthetic {
                    continue;
                }
                for (u, v) in upstream[alpha].0.iter_mut().zip(g.iter()) {
                    *u += (1.0 - theta) * v;
                }
                for (u, v) in upstream[beta].0.iter_mut().zip(g.iter()) {
                    *u += theta * v;
                }
            }
        }
    }
    encoder.zero_grad();
    encoder.backward(&utts, &upstream)
}

fn fit(
    job: Fit<'_>,
    mut model: MlpClassifier,
    mut encoder: Encoder,
    scorer: &mut dyn FnMut(&MlpClassifier, &Encoder) -> Result<f64>,
) -> Result<Trained> {
    let cfg = job.config;
    let ratio = job.ratio;
    if job.train.is_empty() {
        return Err(Error::InvalidData("training set is empty".into()));
    }
    if ratio.open > 0 && job.pool.is_empty() {
        return Err(Error::InvalidData(
            "open-domain quota is positive but the pool is empty".into(),
        ));
    }
    let trainable = encoder.is_trainable();
    let mut head_opt = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut enc_opt = AdamState::new(AdamConfig::with_lr(cfg.encoder_lr));
    let mut shuffle_rng = rng::stream(cfg.seed, rng::STREAM_SHUFFLE);
    let mut compose_rng = rng::stream(cfg.seed, rng::STREAM_COMPOSER);
    let mut trace = match &cfg.trace_path {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => None,
    };

    let mut train_features = if trainable {
        Vec::new()
    } else {
        encoder.encode_batch(&job.train)?
    };
    let mut pool_features = if ratio.open > 0 {
        encoder.encode_batch(job.pool)?
    } else {
        Vec::new()
    };

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, MlpClassifier, Encoder)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..job.train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        if trainable && epoch > 1 && ratio.open > 0 {
            pool_features = encoder.encode_batch(job.pool)?;
        }
        let whole_set_parents: Option<Vec<EmbeddedExample>> =
            if ratio.synthetic > 0 && cfg.synthetic_parents == ParentSource::TrainingSet {
                let feats = if trainable {
                    encoder.encode_batch(&job.train)?
                } else {
                    train_features.clone()
                };
                Some(
                    feats
                        .into_iter()
                        .zip(&job.labels)
                        .map(|(f, &l)| EmbeddedExample::new(f, l))
                        .collect(),
                )
            } else {
                None
            };
        if trainable {
            train_features.clear();
        }

        order.shuffle(&mut shuffle_rng);
        let mut rec = EpochRecord {
            epoch,
            train_loss: 0.0,
            train_accuracy: 0.0,
            validation_score: 0.0,
            batches: 0,
            inliers: 0,
            open: 0,
            synthetic: 0,
            improved: false,
        };
        let mut loss_sum = 0.0;
        let mut correct_inliers = 0usize;

        for (b, chunk) in order.chunks(ratio.inliers).enumerate() {
            let utts: Vec<Utterance> = chunk.iter().map(|&i| job.train[i].clone()).collect();
            let feats = if trainable {
                encoder.encode_batch(&utts)?
            } else {
                chunk.iter().map(|&i| train_features[i].clone()).collect()
            };
            let inliers: Vec<EmbeddedExample> = feats
                .into_iter()
                .zip(chunk)
                .map(|(f, &i)| EmbeddedExample::new(f, job.labels[i]))
                .collect();
            if ratio.synthetic > 0 && distinct_labels(&inliers) < 2 {
                log::debug!("epoch {epoch} batch {b}: skipped, covers a single class");
                continue;
            }
            let batch = match &whole_set_parents {
                Some(parents) => outliers::compose_batch_with_parents(
                    &inliers,
                    parents,
                    &pool_features,
                    &ratio,
                    job.oos_label,
                    &mut compose_rng,
                )?,
                None => outliers::compose_batch(
                    &inliers,
                    &pool_features,
                    &ratio,
                    job.oos_label,
                    &mut compose_rng,
                )?,
            };
            if let Some(w) = trace.as_mut() {
                batch
                    .write_trace(&format!("e{epoch}b{b}"), w)
                    .map_err(|e| Error::io(cfg.trace_path.clone().unwrap(), e))?;
            }
            let out = model.loss_and_grad(&batch.examples).map_err(|e| match e {
                Error::NonFinite(what) => {
                    Error::NonFinite(format!("epoch {epoch}, batch {b}: {what}"))
                }
                other => other,
            })?;
            adam_step(&mut model, &mut head_opt, &out.grads)?;
            if let Err(e) = model.check_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")));
            }

            if trainable {
                backprop_to_encoder(
                    &mut encoder,
                    &utts,
                    job.pool,
                    &batch,
                    &out.input_grads,
                    cfg.detach_synthetic,
                )?;
                if let Some((table, grad)) = encoder.trainable_state() {
                    enc_opt.update(&mut [table], &[grad])?;
                }
            }

            let inlier_correct = model
                .predict(
                    &inliers
                        .iter()
                        .map(|e| e.features.clone())
                        .collect::<Vec<_>>(),
                )?
                .iter()
                .zip(&inliers)
                .filter(|(p, e)| **p == e.label)
                .count();
            correct_inliers += inlier_correct;
            loss_sum += out.report.loss;
            rec.batches += 1;
            rec.inliers += batch.counts.inliers;
            rec.open += batch.counts.open;
            rec.synthetic += batch.counts.synthetic;
        }
        if rec.batches == 0 {
            return Err(Error::InvalidData(
                "no usable mini-batch: every batch covers a single class".into(),
            ));
        }
        rec.train_loss = loss_sum / rec.batches as f64;
        rec.train_accuracy = correct_inliers as f64 / rec.inliers as f64;
        if !rec.train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }

        let score = scorer(&model, &encoder)?;
        if !score.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation score at epoch {epoch}"
            )));
        }
        rec.validation_score = score;
        rec.improved = match &best {
            None => true,
            Some((b, _, _)) => score >= b + IMPROVEMENT_TOLERANCE,
        };
        if rec.improved {
            best = Some((score, model.clone(), encoder.clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        log::info!(
            "epoch {epoch}: loss {:.5} acc {:.4} val {:.5}{}",
            rec.train_loss,
            rec.train_accuracy,
            score,
            if rec.improved { " *" } else { "" }
        );
        history.epochs.push(rec);
        if stale >= cfg.patience {
            break;
        }
    }
    if let Some(w) = trace.as_mut() {
        w.flush()
            .map_err(|e| Error::io(cfg.trace_path.clone().unwrap(), e))?;
    }
    let (_, model, encoder) = best.expect("at least one epoch ran");
    Ok(Trained {
        model,
        encoder,
        history,
    })
}

fn check_split(split: &SplitResult) -> Result<(Vec<Utterance>, Vec<usize>)> {
    let labels = split.label_space.indices_for(&split.train)?;
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InvalidData(format!(
            "training split covers {} class(es); at least 2 are needed",
            distinct.len()
        )));
    }
    Ok((split.train.utterances(), labels))
}

fn build_model(
    config: &TrainConfig,
    encoder: &Encoder,
    num_outputs: usize,
    temperature: f64,
) -> Result<MlpClassifier> {
    MlpClassifier::new(
        Architecture {
            input_dim: encoder.dim(),
            hidden: config.hidden.clone(),
            num_outputs,
            temperature,
        },
        config.seed,
    )
}

/// Trains the (K+1)-way classifier with pseudo outliers.
pub fn train(
    config: &TrainConfig,
    split: &SplitResult,
    open_pool: &[Utterance],
    encoder_spec: &EncoderSpec,
) -> Result<Trained> {
    let encoder = Encoder::build(encoder_spec, config.seed)?;
    let validation = split.validation.clone();
    let labels = split.label_space.clone();
    let per_inlier = config.synthetic_per_inlier();
    let seed = config.seed;
    let mut scorer = move |m: &MlpClassifier, e: &Encoder| {
        validation_score(m, e, &validation, &labels, per_inlier, seed)
    };
    train_with_scorer(config, split, open_pool, encoder, &mut scorer)
}

/// [`train`] with a caller-supplied validation scorer.
pub fn train_with_scorer(
    config: &TrainConfig,
    split: &SplitResult,
    open_pool: &[Utterance],
    encoder: Encoder,
    scorer: &mut dyn FnMut(&MlpClassifier, &Encoder) -> Result<f64>,
) -> Result<Trained> {
    config.validate()?;
    config.ratio.warn_if_extreme();
    let (train, labels) = check_split(split)?;
    let k = split.label_space.num_known();
    let model = build_model(config, &encoder, k + 1, config.temperature)?;
    fit(
        Fit {
            config,
            ratio: config.ratio,
            train,
            labels,
            pool: open_pool,
            oos_label: split.label_space.oos_index,
        },
        model,
        encoder,
        scorer,
    )
}

/// Trains a K-way classifier on inliers only (temperature 1, no outliers).
pub(crate) fn train_k_way(
    config: &TrainConfig,
    split: &SplitResult,
    encoder_spec: &EncoderSpec,
) -> Result<Trained> {
    config.validate()?;
    let (train, labels) = check_split(split)?;
    let encoder = Encoder::build(encoder_spec, config.seed)?;
    let k = split.label_space.num_known();
    let model = build_model(config, &encoder, k, 1.0)?;
    let validation = split.validation.clone();
    let label_space = split.label_space.clone();
    let seed = config.seed;
    let mut scorer = move |m: &MlpClassifier, e: &Encoder| {
        validation_score(m, e, &validation, &label_space, 0.0, seed)
    };
    let ratio = BatchRatio {
        inliers: config.ratio.inliers,
        open: 0,
        synthetic: 0,
    };
    fit(
        Fit {
            config,
            ratio,
            train,
            labels,
            pool: &[],
            oos_label: k,
        },
        model,
        encoder,
        &mut scorer,
    )
}
