//! Pseudo outliers: synthetic convex combinations of inlier features from
//! different classes, open-domain samples, and the batch composer that mixes
//! both into every training step.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureVector;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Above this synthetic:inlier ratio accuracy has been seen to drop sharply.
pub const SYNTHETIC_RATIO_WARN: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedExample {
    pub features: FeatureVector,
    pub label: usize,
}

impl EmbeddedExample {
    pub fn new(features: impl Into<FeatureVector>, label: usize) -> Self {
        EmbeddedExample {
            features: features.into(),
            label,
        }
    }
}

/// Per-batch counts of inliers, open-domain outliers and synthetic outliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRatio {
    pub inliers: usize,
    pub open: usize,
    pub synthetic: usize,
}

impl Default for BatchRatio {
    fn default() -> Self {
        BatchRatio {
            inliers: 100,
            open: 100,
            synthetic: 400,
        }
    }
}

impl BatchRatio {
    pub fn new(inliers: usize, open: usize, synthetic: usize) -> Result<Self> {
        let r = BatchRatio {
            inliers,
            open,
            synthetic,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inliers == 0 {
            return Err(Error::Config(
                "batch ratio needs at least one inlier".into(),
            ));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.inliers + self.open + self.synthetic
    }

    pub fn warn_if_extreme(&self) {
        let r = self.synthetic as f64 / self.inliers as f64;
        if r > SYNTHETIC_RATIO_WARN {
            log::warn!(
                "synthetic:inlier ratio {r:.1} exceeds {SYNTHETIC_RATIO_WARN}; very large synthetic \
                 counts tend to degrade accuracy"
            );
        }
    }
}

impl fmt::Display for BatchRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.inliers, self.open, self.synthetic)
    }
}

impl FromStr for BatchRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("ratio must look like n_i:n_o:n_s, got {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let n: Vec<usize> = parts
            .iter()
            .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        BatchRatio::new(n[0], n[1], n[2])
    }
}

/// One synthetic outlier with the parents it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOutlier {
    pub features: FeatureVector,
    /// (class, index within that class) of the `1 - theta` parent.
    pub alpha: (usize, usize),
    /// (class, index within that class) of the `theta` parent.
    pub beta: (usize, usize),
    pub theta: f64,
}

/// `theta * beta + (1 - theta) * alpha`, kept on the closed segment between
/// the parents (rounding can otherwise step one ulp outside it).
pub fn mix(alpha: &[f64], beta: &[f64], theta: f64) -> FeatureVector {
    alpha
        .iter()
        .zip(beta)
        .map(|(&a, &b)| {
            let v = theta * b + (1.0 - theta) * a;
            v.clamp(a.min(b), a.max(b))
        })
        .collect::<Vec<_>>()
        .into()
}

/// Draws `m` (alpha, beta, theta) triples over groups of item indices.
///
/// A class pair is drawn uniformly among unordered pairs of groups, then one
/// member uniformly from each; theta ~ U(0, 1) per outlier.
fn draw_parent_pairs(
    groups: &[&[usize]],
    m: usize,
    rng: &mut Rng,
) -> Vec<(usize, usize, usize, usize, f64)> {
    let g = groups.len();
    let pairs = g * (g - 1) / 2;
    (0..m)
        .map(|_| {
            let mut p = rng.random_range(0..pairs);
            // unrank p into (i, j), i < j
            let mut i = 0;
            while p >= g - 1 - i {
                p -= g - 1 - i;
                i += 1;
            }
            let j = i + 1 + p;
            let a = rng.random_range(0..groups[i].len());
            let b = rng.random_range(0..groups[j].len());
            let theta: f64 = rng.random();
            (i, groups[i][a], j, groups[j][b], theta)
        })
        .collect()
}

pub fn synthesize_outliers_traced(
    features_by_class: &BTreeMap<usize, Vec<FeatureVector>>,
    m: usize,
    rng: &mut Rng,
) -> Result<Vec<SyntheticOutlier>> {
    let classes: Vec<(usize, &Vec<FeatureVector>)> = features_by_class
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(c, v)| (*c, v))
        .collect();
    if classes.len() < 2 {
        return Err(Error::InvalidData(format!(
            "synthetic outliers need at least 2 non-empty classes, got {}",
            classes.len()
        )));
    }
    let index_lists: Vec<Vec<usize>> = classes
        .iter()
        .map(|(_, v)| (0..v.len()).collect())
        .collect();
    let groups: Vec<&[usize]> = index_lists.iter().map(Vec::as_slice).collect();
    Ok(draw_parent_pairs(&groups, m, rng)
        .into_iter()
        .map(|(ga, ia, gb, ib, theta)| {
            let (ca, va) = classes[ga];
            let (cb, vb) = classes[gb];
            SyntheticOutlier {
                features: mix(&va[ia], &vb[ib], theta),
                alpha: (ca, ia),
                beta: (cb, ib),
                theta,
            }
        })
        .collect())
}

pub fn synthesize_outliers(
    features_by_class: &BTreeMap<usize, Vec<FeatureVector>>,
    m: usize,
    rng: &mut Rng,
) -> Result<Vec<FeatureVector>> {
    Ok(synthesize_outliers_traced(features_by_class, m, rng)?
        .into_iter()
        .map(|s| s.features)
        .collect())
}

fn draw_pool_indices(pool_len: usize, h: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if h == 0 {
        return Ok(Vec::new());
    }
    if pool_len == 0 {
        return Err(Error::InvalidData(format!(
            "cannot sample {h} open-domain outliers from an empty pool"
        )));
    }
    Ok((0..h).map(|_| rng.random_range(0..pool_len)).collect())
}

/// Samples `h` pool vectors uniformly with replacement.
pub fn sample_open_outliers(
    pool_features: &[FeatureVector],
    h: usize,
    rng: &mut Rng,
) -> Result<Vec<FeatureVector>> {
    Ok(draw_pool_indices(pool_features.len(), h, rng)?
        .into_iter()
        .map(|i| pool_features[i].clone())
        .collect())
}

/// Where a batch example came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Inlier {
        index: usize,
    },
    Open {
        pool_index: usize,
    },
    /// `alpha`/`beta` index the parent set (the batch inliers unless composed
    /// with an external parent set).
    Synthetic {
        alpha: usize,
        beta: usize,
        theta: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub examples: Vec<EmbeddedExample>,
    pub counts: BatchRatio,
    pub provenance: Vec<Provenance>,
}

impl TrainBatch {
    /// Appends one jsonl line per synthetic outlier: parents and theta.
    pub fn write_trace(&self, batch_id: &str, out: &mut impl Write) -> std::io::Result<()> {
        for p in &self.provenance {
            if let Provenance::Synthetic { alpha, beta, theta } = p {
                let line = serde_json::json!({
                    "batch": batch_id, "alpha": alpha, "beta": beta, "theta": theta
                });
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

/// Composes a batch: the given inliers, `ratio.open` pool samples and
/// `ratio.synthetic` fresh synthetic outliers whose parents are the batch
/// inliers. Every outlier is labeled `oos_label`.
pub fn compose_batch(
    inliers: &[EmbeddedExample],
    pool_features: &[FeatureVector],
    ratio: &BatchRatio,
    oos_label: usize,
    rng: &mut Rng,
) -> Result<TrainBatch> {
    compose_batch_with_parents(inliers, inliers, pool_features, ratio, oos_label, rng)
}

/// Like [`compose_batch`] but draws synthetic parents from `parents`.
pub fn compose_batch_with_parents(
    inliers: &[EmbeddedExample],
    parents: &[EmbeddedExample],
    pool_features: &[FeatureVector],
    ratio: &BatchRatio,
    oos_label: usize,
    rng: &mut Rng,
) -> Result<TrainBatch> {
    if let Some(bad) = inliers.iter().find(|e| e.label >= oos_label) {
        return Err(Error::LabelOutOfRange {
            label: bad.label,
            num_classes: oos_label,
        });
    }
    let mut examples: Vec<EmbeddedExample> = inliers.to_vec();
    let mut provenance: Vec<Provenance> = (0..inliers.len())
        .map(|index| Provenance::Inlier { index })
        .collect();

    for pool_index in draw_pool_indices(pool_features.len(), ratio.open, rng)? {
        examples.push(EmbeddedExample::new(
            pool_features[pool_index].clone(),
            oos_label,
        ));
        provenance.push(Provenance::Open { pool_index });
    }

    if ratio.synthetic > 0 {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in parents.iter().enumerate() {
            by_class.entry(e.label).or_default().push(i);
        }
        if by_class.len() < 2 {
            return Err(Error::InvalidData(format!(
                "synthetic outliers need parents from at least 2 classes, got {}",
                by_class.len()
            )));
        }
        let groups: Vec<&[usize]> = by_class.values().map(Vec::as_slice).collect();
        for (_, alpha, _, beta, theta) in draw_parent_pairs(&groups, ratio.synthetic, rng) {
            let features = mix(&parents[alpha].features, &parents[beta].features, theta);
            examples.push(EmbeddedExample::new(features, oos_label));
            provenance.push(Provenance::Synthetic { alpha, beta, theta });
        }
    }

    if let Some(first) = examples.first() {
        let d = first.features.dim();
        if let Some(bad) = examples.iter().find(|e| e.features.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.features.dim(),
            });
        }
    }
    Ok(TrainBatch {
        examples,
        counts: BatchRatio {
            inliers: inliers.len(),
            open: ratio.open,
            synthetic: ratio.synthetic,
        },
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn two_class_map() -> BTreeMap<usize, Vec<FeatureVector>> {
        let mut m = BTreeMap::new();
        m.insert(0, vec![FeatureVector(vec![1.0, 0.0])]);
        m.insert(1, vec![FeatureVector(vec![0.0, 1.0])]);
        m
    }

    #[test]
    fn midpoint_and_endpoints() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert_eq!(mix(&a, &b, 0.5).0, vec![0.5, 0.5]);
        assert_eq!(mix(&a, &b, 0.0).0, a.to_vec());
        assert_eq!(mix(&a, &b, 1.0).0, b.to_vec());
    }

    #[test]
    fn parents_come_from_different_classes() {
        let mut m = BTreeMap::new();
        for c in 0..4 {
            m.insert(
                c,
                (0..3)
                    .map(|i| FeatureVector(vec![c as f64, i as f64]))
                    .collect(),
            );
        }
        let mut r = rng::stream(1, 0);
        let out = synthesize_outliers_traced(&m, 2000, &mut r).unwrap();
        assert_eq!(out.len(), 2000);
        assert!(out.iter().all(|s| s.alpha.0 != s.beta.0));
        // every unordered pair is reached
        let mut seen = std::collections::HashSet::new();
        for s in &out {
            seen.insert((s.alpha.0.min(s.beta.0), s.alpha.0.max(s.beta.0)));
        }
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn needs_two_nonempty_classes() {
        let mut m = BTreeMap::new();
        m.insert(0, vec![FeatureVector(vec![1.0])]);
        m.insert(1, Vec::new());
        assert!(synthesize_outliers(&m, 1, &mut rng::stream(0, 0)).is_err());
        assert_eq!(
            synthesize_outliers(&two_class_map(), 0, &mut rng::stream(0, 0))
                .unwrap()
                .len(),
            0
        );
    }

    #[test]
    fn open_sampling() {
        let pool = vec![FeatureVector(vec![3.0])];
        let out = sample_open_outliers(&pool, 3, &mut rng::stream(0, 0)).unwrap();
        assert_eq!(out, vec![pool[0].clone(); 3]);
        assert!(sample_open_outliers(&pool, 0, &mut rng::stream(0, 0))
            .unwrap()
            .is_empty());
        assert!(sample_open_outliers(&[], 1, &mut rng::stream(0, 0)).is_err());
        assert!(sample_open_outliers(&[], 0, &mut rng::stream(0, 0))
            .unwrap()
            .is_empty());

        let pool: Vec<FeatureVector> = (0..100).map(|i| FeatureVector(vec![i as f64])).collect();
        let a = sample_open_outliers(&pool, 50, &mut rng::stream(5, 0)).unwrap();
        let b = sample_open_outliers(&pool, 50, &mut rng::stream(5, 0)).unwrap();
        assert_eq!(a, b);
    }

    fn inliers(n: usize, classes: usize) -> Vec<EmbeddedExample> {
        (0..n)
            .map(|i| EmbeddedExample::new(vec![i as f64, (i % classes) as f64], i % classes))
            .collect()
    }

    #[test]
    fn default_ratio_batch() {
        let inl = inliers(100, 4);
        let pool: Vec<FeatureVector> = (0..10)
            .map(|i| FeatureVector(vec![-(i as f64), 9.0]))
            .collect();
        let batch = compose_batch(
            &inl,
            &pool,
            &BatchRatio::default(),
            4,
            &mut rng::stream(0, 0),
        )
        .unwrap();
        assert_eq!(batch.examples.len(), 600);
        assert_eq!(batch.examples.iter().filter(|e| e.label == 4).count(), 500);
        assert_eq!(batch.counts, BatchRatio::new(100, 100, 400).unwrap());
    }

    #[test]
    fn inliers_only_ratio() {
        let inl = inliers(10, 2);
        let batch = compose_batch(
            &inl,
            &[],
            &BatchRatio::new(10, 0, 0).unwrap(),
            2,
            &mut rng::stream(0, 0),
        )
        .unwrap();
        assert_eq!(batch.examples, inl);
    }

    #[test]
    fn synthetic_vectors_are_fresh_each_call() {
        let inl = inliers(20, 2);
        let ratio = BatchRatio::new(20, 0, 10).unwrap();
        let mut r = rng::stream(0, 0);
        let a = compose_batch(&inl, &[], &ratio, 2, &mut r).unwrap();
        let b = compose_batch(&inl, &[], &ratio, 2, &mut r).unwrap();
        assert_ne!(a.examples[20..], b.examples[20..]);
    }

    #[test]
    fn single_class_batch_cannot_synthesize() {
        let inl = inliers(5, 1);
        let ratio = BatchRatio::new(5, 0, 3).unwrap();
        assert!(compose_batch(&inl, &[], &ratio, 1, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!(
            "100:100:400".parse::<BatchRatio>().unwrap(),
            BatchRatio::default()
        );
        assert!("0:1:1".parse::<BatchRatio>().is_err());
        assert!("1:2".parse::<BatchRatio>().is_err());
        assert_eq!(BatchRatio::default().to_string(), "100:100:400");
    }

    #[test]
    fn trace_lines() {
        let inl = inliers(4, 2);
        let batch = compose_batch(
            &inl,
            &[],
            &BatchRatio::new(4, 0, 2).unwrap(),
            2,
            &mut rng::stream(0, 0),
        )
        .unwrap();
        let mut buf = Vec::new();
        batch.write_trace("e0b0", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"theta\""));
    }
}
