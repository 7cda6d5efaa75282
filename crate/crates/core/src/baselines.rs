//! Maximum-softmax-probability baseline: a K-way classifier trained on
//! inliers only, rejecting an input as out of scope when its top softmax
//! probability falls below a threshold.

use rand::seq::index;

use crate::classifier::{argmax, MlpClassifier};
use crate::data::{Dataset, LabelSpace, SplitResult, Utterance};
use crate::encoder::{Encoder, EncoderSpec, FeatureVector};
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, confusion, Predictor};
use crate::rng;
use crate::trainer::{self, TrainConfig, TrainHistory};

/// Candidate thresholds 0.05, 0.10, ..., 0.95.
pub fn threshold_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MspModel {
    classifier: MlpClassifier,
    threshold: f64,
}

impl MspModel {
    pub fn new(classifier: MlpClassifier, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!(
                "MSP threshold must lie in (0, 1), got {threshold}"
            )));
        }
        Ok(MspModel {
            classifier,
            threshold,
        })
    }

    pub fn classifier(&self) -> &MlpClassifier {
        &self.classifier
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn set_threshold(&mut self, t: f64) -> Result<()> {
        *self = MspModel::new(self.classifier.clone(), t)?;
        Ok(())
    }

    /// K-way softmax probabilities.
    pub fn probabilities(&self, features: &[FeatureVector]) -> Result<Vec<Vec<f64>>> {
        let probs = self.classifier.probabilities(features)?;
        Ok(probs.rows().into_iter().map(|r| r.to_vec()).collect())
    }
}

/// Top probability and its class for each row.
fn confidence(probs: &[Vec<f64>]) -> Vec<(f64, usize)> {
    probs
        .iter()
        .map(|p| {
            let c = argmax(p);
            (p[c], c)
        })
        .collect()
}

/// Thresholded decision on probability rows: `K` when the top probability is
/// below `threshold`, else the argmax. A threshold of 1 or more rejects
/// everything, since softmax can round to exactly 1.0.
pub fn msp_decide(probs: &[Vec<f64>], threshold: f64) -> Vec<usize> {
    probs
        .iter()
        .map(|p| {
            let k = p.len();
            let c = argmax(p);
            if p[c] < threshold || threshold >= 1.0 {
                k
            } else {
                c
            }
        })
        .collect()
}

pub fn msp_predict(model: &MspModel, features: &[FeatureVector]) -> Result<Vec<usize>> {
    Ok(msp_decide(&model.probabilities(features)?, model.threshold))
}

impl Predictor for MspModel {
    fn num_known(&self) -> usize {
        self.classifier.num_outputs()
    }

    fn predict(&self, features: &[FeatureVector]) -> Result<Vec<usize>> {
        msp_predict(self, features)
    }
}

/// Grid search for the threshold maximizing macro-F1 over K+1 classes.
///
/// `inliers` are `(max probability, argmax, gold)`; `outliers` are
/// `(max probability, argmax)` with gold K. Ties keep the lower threshold.
pub fn calibrate_threshold_from_scores(
    inliers: &[(f64, usize, usize)],
    outliers: &[(f64, usize)],
    num_known: usize,
) -> Result<f64> {
    let golds: Vec<usize> = inliers
        .iter()
        .map(|x| x.2)
        .chain(std::iter::repeat_n(num_known, outliers.len()))
        .collect();
    let scored: Vec<(f64, usize)> = inliers
        .iter()
        .map(|x| (x.0, x.1))
        .chain(outliers.iter().copied())
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for t in threshold_grid() {
        let preds: Vec<usize> = scored
            .iter()
            .map(|&(p, c)| if p < t { num_known } else { c })
            .collect();
        let f1 = compute_metrics(&confusion(&preds, &golds, num_known)?)?.macro_f1_all;
        if best.is_none_or(|(_, b)| f1 > b) {
            best = Some((t, f1));
        }
    }
    best.map(|(t, _)| t)
        .ok_or_else(|| Error::InvalidData("threshold grid produced no candidate".into()))
}

/// Calibrates on validation inliers plus a seeded sample of open-pool
/// utterances standing in for outliers (as many as there are validation
/// examples, or the whole pool if smaller).
pub fn calibrate_threshold(
    model: &MspModel,
    encoder: &Encoder,
    validation: &Dataset,
    label_space: &LabelSpace,
    open_pool: &[Utterance],
    seed: u64,
) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::InvalidData(
            "calibration needs validation examples".into(),
        ));
    }
    if open_pool.is_empty() {
        return Err(Error::InvalidData(
            "calibration needs an open-domain pool".into(),
        ));
    }
    let golds = label_space.indices_for(validation)?;
    let val_probs = model.probabilities(&encoder.encode_batch(&validation.utterances())?)?;
    let n = open_pool.len().min(validation.len());
    let mut r = rng::stream(seed, rng::STREAM_CALIBRATION);
    let mut picks = index::sample(&mut r, open_pool.len(), n).into_vec();
    picks.sort_unstable();
    let sample: Vec<Utterance> = picks.into_iter().map(|i| open_pool[i].clone()).collect();
    let pool_probs = model.probabilities(&encoder.encode_batch(&sample)?)?;

    let inliers: Vec<(f64, usize, usize)> = confidence(&val_probs)
        .into_iter()
        .zip(golds)
        .map(|((p, c), g)| (p, c, g))
        .collect();
    calibrate_threshold_from_scores(&inliers, &confidence(&pool_probs), label_space.num_known())
}

#[derive(Debug, Clone)]
pub struct MspTrained {
    pub model: MspModel,
    pub encoder: Encoder,
    pub history: TrainHistory,
}

/// Trains the K-way classifier (temperature 1, no pseudo outliers) with the
/// same optimizer and early stopping as the main method. The threshold is
/// 0.5 until calibrated.
pub fn train_msp(
    config: &TrainConfig,
    split: &SplitResult,
    encoder_spec: &EncoderSpec,
) -> Result<MspTrained> {
    let trained = trainer::train_k_way(config, split, encoder_spec)?;
    Ok(MspTrained {
        model: MspModel::new(trained.model, 0.5)?,
        encoder: trained.encoder,
        history: trained.history,
    })
}

/// [`train_msp`] followed by [`calibrate_threshold`] against `open_pool`.
pub fn train_and_calibrate_msp(
    config: &TrainConfig,
    split: &SplitResult,
    open_pool: &[Utterance],
    encoder_spec: &EncoderSpec,
) -> Result<MspTrained> {
    let mut trained = train_msp(config, split, encoder_spec)?;
    let t = calibrate_threshold(
        &trained.model,
        &trained.encoder,
        &split.validation,
        &split.label_space,
        open_pool,
        config.seed,
    )?;
    trained.model.set_threshold(t)?;
    Ok(trained)
}
