//! Utterance encoders: map an utterance to a d-dimensional feature vector.
//!
//! Three implementations sit behind [`Encoder`]:
//! - `Identity` passes numeric utterances through unchanged.
//! - `HashedMean` averages rows of a hashed token-embedding table; the table
//!   can be trained jointly with the classifier.
//! - `Precomputed` looks vectors up by utterance id in an `OOSE` file.

use std::collections::HashMap;
use std::ops::Deref;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use crate::data::{Content, Utterance};
use crate::error::{Error, Result};
use crate::oose;
use crate::rng;

/// A point in feature space.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        FeatureVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(v: Vec<f64>) -> Self {
        FeatureVector(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Identity,
    HashedMean,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub dim: usize,
    #[serde(default = "default_buckets")]
    pub hash_buckets: usize,
    #[serde(default)]
    pub trainable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_path: Option<PathBuf>,
}

fn default_buckets() -> usize {
    DEFAULT_HASH_BUCKETS
}

pub const DEFAULT_HASHED_DIM: usize = 768;
pub const DEFAULT_HASH_BUCKETS: usize = 1 << 14;
pub const MIN_HASH_BUCKETS: usize = 1024;
/// Seed for token hashing; fixed so bucket assignment never changes between runs.
pub const TOKEN_HASH_SEED: u64 = 0x0005_eed0_0c0f_fee5;
const INIT_RANGE: f64 = 0.05;

impl EncoderSpec {
    pub fn identity(dim: usize) -> Self {
        EncoderSpec {
            kind: EncoderKind::Identity,
            dim,
            hash_buckets: default_buckets(),
            trainable: false,
            manifest_path: None,
        }
    }

    pub fn hashed_mean(dim: usize, hash_buckets: usize, trainable: bool) -> Self {
        EncoderSpec {
            kind: EncoderKind::HashedMean,
            dim,
            hash_buckets,
            trainable,
            manifest_path: None,
        }
    }

    pub fn precomputed(manifest_path: impl Into<PathBuf>, dim: usize) -> Self {
        EncoderSpec {
            kind: EncoderKind::Precomputed,
            dim,
            hash_buckets: default_buckets(),
            trainable: false,
            manifest_path: Some(manifest_path.into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("encoder dim must be positive".into()));
        }
        match self.kind {
            EncoderKind::HashedMean if self.hash_buckets < MIN_HASH_BUCKETS => {
                Err(Error::Config(format!(
                    "hash_buckets must be at least {MIN_HASH_BUCKETS}, got {}",
                    self.hash_buckets
                )))
            }
            EncoderKind::Precomputed if self.manifest_path.is_none() => Err(Error::Config(
                "precomputed encoder needs a manifest path".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Lowercase, split on whitespace, strip surrounding punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_ascii_control()))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashedMeanEncoder {
    dim: usize,
    buckets: usize,
    trainable: bool,
    /// `buckets x dim`, row-major.
    table: Vec<f64>,
    grad: Vec<f64>,
}

impl HashedMeanEncoder {
    pub fn new(dim: usize, buckets: usize, trainable: bool, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::STREAM_ENCODER_INIT);
        let table = (0..dim * buckets)
            .map(|_| r.random_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        HashedMeanEncoder {
            dim,
            buckets,
            trainable,
            table,
            grad: if trainable {
                vec![0.0; dim * buckets]
            } else {
                Vec::new()
            },
        }
    }

    pub fn from_table(
        dim: usize,
        buckets: usize,
        trainable: bool,
        table: Vec<f64>,
    ) -> Result<Self> {
        if table.len() != dim * buckets {
            return Err(Error::Format(format!(
                "embedding table has {} values, expected {buckets}x{dim}",
                table.len()
            )));
        }
        Ok(HashedMeanEncoder {
            dim,
            buckets,
            trainable,
            grad: if trainable {
                vec![0.0; table.len()]
            } else {
                Vec::new()
            },
            table,
        })
    }

    pub fn bucket(&self, token: &str) -> usize {
        (XxHash64::oneshot(TOKEN_HASH_SEED, token.as_bytes()) % self.buckets as u64) as usize
    }

    pub fn row(&self, bucket: usize) -> &[f64] {
        &self.table[bucket * self.dim..(bucket + 1) * self.dim]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    fn encode_text(&self, text: &str) -> FeatureVector {
        let buckets: Vec<usize> = tokenize(text).iter().map(|t| self.bucket(t)).collect();
        let mut out = vec![0.0; self.dim];
        if buckets.is_empty() {
            return FeatureVector(out);
        }
        for &b in &buckets {
            for (o, v) in out.iter_mut().zip(self.row(b)) {
                *o += v;
            }
        }
        let n = buckets.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        FeatureVector(out)
    }

    fn accumulate(&mut self, text: &str, upstream: &[f64]) {
        let buckets: Vec<usize> = tokenize(text).iter().map(|t| self.bucket(t)).collect();
        if buckets.is_empty() {
            return;
        }
        let n = buckets.len() as f64;
        for b in buckets {
            let row = &mut self.grad[b * self.dim..(b + 1) * self.dim];
            for (g, u) in row.iter_mut().zip(upstream) {
                *g += u / n;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedEncoder {
    manifest_path: PathBuf,
    dim: usize,
    rows: Vec<FeatureVector>,
    by_id: HashMap<String, usize>,
}

impl PrecomputedEncoder {
    pub fn open(path: &Path) -> Result<Self> {
        let (matrix, entries) = oose::read(path)?;
        let rows: Vec<FeatureVector> = (0..matrix.count())
            .map(|i| FeatureVector(matrix.row(i).iter().map(|&v| f64::from(v)).collect()))
            .collect();
        if let Some(i) = rows.iter().position(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("{} row {i}", path.display())));
        }
        let mut by_id = HashMap::with_capacity(entries.len());
        for e in entries {
            if by_id.insert(e.id.clone(), e.row).is_some() {
                return Err(Error::InvalidData(format!(
                    "{}: id {:?} listed twice",
                    oose::sidecar_path(path).display(),
                    e.id
                )));
            }
        }
        Ok(PrecomputedEncoder {
            manifest_path: path.to_path_buf(),
            dim: matrix.dim,
            rows,
            by_id,
        })
    }

    pub fn manifest_path(&self) -> &Path {
        &self.manifest_path
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Identity { dim: usize },
    HashedMean(HashedMeanEncoder),
    Precomputed(PrecomputedEncoder),
}

impl Encoder {
    /// Builds an encoder; `seed` initializes the hashed-mean table.
    pub fn build(spec: &EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.kind {
            EncoderKind::Identity => Encoder::Identity { dim: spec.dim },
            EncoderKind::HashedMean => Encoder::HashedMean(HashedMeanEncoder::new(
                spec.dim,
                spec.hash_buckets,
                spec.trainable,
                seed,
            )),
            EncoderKind::Precomputed => {
                let enc = PrecomputedEncoder::open(spec.manifest_path.as_deref().unwrap())?;
                if enc.dim != spec.dim {
                    return Err(Error::DimensionMismatch {
                        expected: spec.dim,
                        got: enc.dim,
                    });
                }
                Encoder::Precomputed(enc)
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::HashedMean(h) => h.dim,
            Encoder::Precomputed(p) => p.dim,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Encoder::HashedMean(h) if h.trainable)
    }

    pub fn spec(&self) -> EncoderSpec {
        match self {
            Encoder::Identity { dim } => EncoderSpec::identity(*dim),
            Encoder::HashedMean(h) => EncoderSpec::hashed_mean(h.dim, h.buckets, h.trainable),
            Encoder::Precomputed(p) => EncoderSpec::precomputed(p.manifest_path.clone(), p.dim),
        }
    }

    pub fn encode(&self, utterance: &Utterance) -> Result<FeatureVector> {
        match (self, &utterance.content) {
            (Encoder::Identity { dim }, Content::Numeric(v)) => {
                if v.len() != *dim {
                    return Err(Error::DimensionMismatch {
                        expected: *dim,
                        got: v.len(),
                    });
                }
                Ok(FeatureVector(v.clone()))
            }
            (Encoder::HashedMean(h), Content::Text(t)) => Ok(h.encode_text(t)),
            (Encoder::Precomputed(p), _) => p
                .by_id
                .get(&utterance.id)
                .map(|&row| p.rows[row].clone())
                .ok_or_else(|| Error::MissingId(utterance.id.clone())),
            (Encoder::Identity { .. }, Content::Text(_)) => Err(Error::InvalidData(format!(
                "identity encoder needs numeric utterances; {:?} is text",
                utterance.id
            ))),
            (Encoder::HashedMean(_), Content::Numeric(_)) => Err(Error::InvalidData(format!(
                "hashed-mean encoder needs text utterances; {:?} is numeric",
                utterance.id
            ))),
        }
    }

    pub fn encode_batch(&self, utterances: &[Utterance]) -> Result<Vec<FeatureVector>> {
        utterances
            .iter()
            .enumerate()
            .map(|(i, u)| self.encode(u).map_err(|e| Error::at(i, e)))
            .collect()
    }

    /// Accumulates table gradients for `upstream` (dLoss/dFeature per utterance).
    /// A no-op for encoders without trainable state.
    pub fn backward(&mut self, utterances: &[Utterance], upstream: &[FeatureVector]) -> Result<()> {
        if utterances.len() != upstream.len() {
            return Err(Error::InvalidData(format!(
                "{} gradients for {} utterances",
                upstream.len(),
                utterances.len()
            )));
        }
        let dim = self.dim();
        if let Some(g) = upstream.iter().find(|g| g.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: g.dim(),
            });
        }
        let Encoder::HashedMean(h) = self else {
            return Ok(());
        };
        if !h.trainable {
            return Ok(());
        }
        for (u, g) in utterances.iter().zip(upstream) {
            if let Content::Text(t) = &u.content {
                h.accumulate(t, g);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Encoder::HashedMean(h) = self {
            h.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Trainable table and its gradient, when there is one.
    pub fn trainable_state(&mut self) -> Option<(&mut [f64], &[f64])> {
        match self {
            Encoder::HashedMean(h) if h.trainable => Some((&mut h.table, &h.grad)),
            _ => None,
        }
    }
}
