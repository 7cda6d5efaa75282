//! One experiment run = split (optional) + train + evaluate, for either the
//! (K+1)-way method or the MSP baseline, plus mean/stddev aggregation over seeds.

use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::checkpoint::Checkpoint;
use crate::data::{split_known_unknown, Dataset, SplitResult, SplitSpec, Utterance};
use crate::encoder::EncoderSpec;
use crate::error::Result;
use crate::evaluation::{evaluate, MetricsReport};
use crate::trainer::{self, TrainConfig, TrainHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    Msp,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub method: Method,
    pub seed: u64,
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub metrics: MetricsReport,
}

pub fn run_on_split(
    method: Method,
    config: &TrainConfig,
    split: &SplitResult,
    open_pool: &[Utterance],
    encoder_spec: &EncoderSpec,
) -> Result<RunOutput> {
    let (checkpoint, history) = match method {
        Method::Ours => {
            let t = trainer::train(config, split, open_pool, encoder_spec)?;
            (
                Checkpoint::ours(&t.model, &split.label_space, &t.encoder, config.seed),
                t.history,
            )
        }
        Method::Msp => {
            let t = baselines::train_and_calibrate_msp(config, split, open_pool, encoder_spec)?;
            (
                Checkpoint::msp(&t.model, &split.label_space, &t.encoder, config.seed),
                t.history,
            )
        }
    };
    let predictor = checkpoint.predictor()?;
    let encoder = checkpoint.encoder()?;
    let metrics = evaluate(predictor.as_ref(), &encoder, &split.test)?;
    Ok(RunOutput {
        method,
        seed: config.seed,
        checkpoint,
        history,
        metrics,
    })
}

/// Splits `dataset` with `seed` and runs `method` on it, training with the same seed.
#[allow(clippy::too_many_arguments)]
pub fn run_seed(
    method: Method,
    config: &TrainConfig,
    dataset: &Dataset,
    open_pool: &[Utterance],
    known_ratio: f64,
    val_fraction: f64,
    encoder_spec: &EncoderSpec,
    seed: u64,
) -> Result<RunOutput> {
    let split = split_known_unknown(dataset, &SplitSpec::new(known_ratio, seed), val_fraction)?;
    let config = TrainConfig {
        seed,
        ..config.clone()
    };
    run_on_split(method, &config, &split, open_pool, encoder_spec)
}

/// The four headline scores.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub macro_f1_all: f64,
    pub macro_f1_known: f64,
    pub f1_unknown: f64,
}

impl From<&MetricsReport> for Scores {
    fn from(m: &MetricsReport) -> Self {
        Scores {
            accuracy: m.accuracy,
            macro_f1_all: m.macro_f1_all,
            macro_f1_known: m.macro_f1_known,
            f1_unknown: m.f1_unknown,
        }
    }
}

impl Scores {
    fn fields(&self) -> [f64; 4] {
        [
            self.accuracy,
            self.macro_f1_all,
            self.macro_f1_known,
            self.f1_unknown,
        ]
    }

    fn from_fields(f: [f64; 4]) -> Self {
        Scores {
            accuracy: f[0],
            macro_f1_all: f[1],
            macro_f1_known: f[2],
            f1_unknown: f[3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub mean: Scores,
    /// Sample standard deviation (n - 1 denominator; 0 for a single run).
    pub std: Scores,
}

pub fn aggregate(scores: &[Scores]) -> Aggregate {
    let n = scores.len();
    let mut mean = [0.0; 4];
    for s in scores {
        for (m, v) in mean.iter_mut().zip(s.fields()) {
            *m += v;
        }
    }
    if n > 0 {
        mean.iter_mut().for_each(|m| *m /= n as f64);
    }
    let mut var = [0.0; 4];
    if n > 1 {
        for s in scores {
            for ((acc, v), m) in var.iter_mut().zip(s.fields()).zip(mean) {
                *acc += (v - m) * (v - m);
            }
        }
        var.iter_mut()
            .for_each(|v| *v = (*v / (n - 1) as f64).sqrt());
    }
    Aggregate {
        runs: n,
        mean: Scores::from_fields(mean),
        std: Scores::from_fields(var),
    }
}
