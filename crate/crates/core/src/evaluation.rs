//! Confusion matrices and the reporting suite: overall accuracy, macro-F1
//! over all K+1 classes, macro-F1 over the K known classes and F1 of the
//! out-of-scope class.

use serde::{Deserialize, Serialize};

use crate::classifier::MlpClassifier;
use crate::data::TestExample;
use crate::encoder::{Encoder, FeatureVector};
use crate::error::{Error, Result};

/// Anything that maps features to labels in `[0, K]`.
pub trait Predictor {
    /// K, the number of known classes; label K means out of scope.
    fn num_known(&self) -> usize;
    fn predict(&self, features: &[FeatureVector]) -> Result<Vec<usize>>;
}

impl Predictor for MlpClassifier {
    fn num_known(&self) -> usize {
        self.num_outputs() - 1
    }

    fn predict(&self, features: &[FeatureVector]) -> Result<Vec<usize>> {
        MlpClassifier::predict(self, features)
    }
}

/// `(K+1) x (K+1)` counts; rows are gold labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(num_known: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; num_known + 1]; num_known + 1],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Plain-text rendering with row/column indices.
    pub fn pretty(&self) -> String {
        let width = self
            .counts
            .iter()
            .flatten()
            .map(|c| c.to_string().len())
            .max()
            .unwrap_or(1)
            .max(self.counts.len().to_string().len())
            .max(4);
        let mut s = format!("{:>w$} |", "g\\p", w = width);
        for j in 0..self.counts.len() {
            s += &format!(" {:>w$}", j, w = width);
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s += &format!("{:>w$} |", i, w = width);
            for c in row {
                s += &format!(" {:>w$}", c, w = width);
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(preds: &[usize], golds: &[usize], num_known: usize) -> Result<ConfusionMatrix> {
    if preds.len() != golds.len() {
        return Err(Error::InvalidData(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(num_known);
    for (&p, &g) in preds.iter().zip(golds) {
        for label in [p, g] {
            if label > num_known {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_classes: num_known + 1,
                });
            }
        }
        cm.counts[g][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1_all: f64,
    pub macro_f1_known: f64,
    pub f1_unknown: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    // 0/0 is scored as 0.
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class F1 is `2PR / (P + R)`; a class with no predictions or no gold
/// examples has the corresponding P or R at 0, and F1 is 0 when both are.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let n = cm.num_classes();
    if n < 2 || cm.counts.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidData(
            "confusion matrix must be square with at least 2 classes".into(),
        ));
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidData(
            "cannot compute metrics of an empty confusion matrix".into(),
        ));
    }
    let per_class_f1: Vec<f64> = (0..n)
        .map(|c| {
            let tp = cm.counts[c][c];
            let predicted: u64 = cm.counts.iter().map(|r| r[c]).sum();
            let gold: u64 = cm.counts[c].iter().sum();
            let p = ratio(tp, predicted);
            let r = ratio(tp, gold);
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .collect();
    let k = n - 1;
    Ok(MetricsReport {
        accuracy: cm.trace() as f64 / total as f64,
        macro_f1_all: per_class_f1.iter().sum::<f64>() / n as f64,
        macro_f1_known: per_class_f1[..k].iter().sum::<f64>() / k as f64,
        f1_unknown: per_class_f1[k],
        per_class_f1,
        confusion: cm.clone(),
    })
}

/// Encodes, predicts and scores a test set.
pub fn evaluate(
    predictor: &dyn Predictor,
    encoder: &Encoder,
    test: &[TestExample],
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::InvalidData("test set is empty".into()));
    }
    let k = predictor.num_known();
    if let Some(bad) = test.iter().find(|t| t.target > k) {
        return Err(Error::Mismatch(format!(
            "test example {:?} has target {} but the model knows K = {k} classes",
            bad.utterance.id, bad.target
        )));
    }
    let utts: Vec<_> = test.iter().map(|t| t.utterance.clone()).collect();
    let features = encoder.encode_batch(&utts)?;
    let preds = predictor.predict(&features)?;
    let golds: Vec<usize> = test.iter().map(|t| t.target).collect();
    compute_metrics(&confusion(&preds, &golds, k)?)
}
