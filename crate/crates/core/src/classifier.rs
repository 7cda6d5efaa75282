//! The MLP discriminator over feature vectors, trained with a
//! temperature-scaled softmax cross-entropy.
//!
//! Layout: `input -> hidden[0] -> ... -> hidden[n-1] -> outputs`, ReLU after
//! every hidden layer, no activation on the logits. Weights are stored
//! `fan_in x fan_out` so a batch forward pass is `X . W + b`. All arithmetic
//! is f64.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureVector;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::outliers::EmbeddedExample;
use crate::rng;

pub const DEFAULT_HIDDEN: [usize; 2] = [1024, 1024];
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weights: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_outputs: usize,
    pub temperature: f64,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_outputs < 2 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {self:?}")));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.num_outputs);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    arch: Architecture,
    layers: Vec<Dense>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub correct: usize,
    pub batch_size: usize,
}

/// Parameter gradients, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect()
    }
}

pub struct LossOutput {
    pub report: LossReport,
    pub grads: Gradients,
    /// dLoss/dFeature for every example, in batch order.
    pub input_grads: Vec<FeatureVector>,
}

fn to_matrix(features: &[FeatureVector], dim: usize) -> Result<Array2<f64>> {
    let mut flat = Vec::with_capacity(features.len() * dim);
    for (i, f) in features.iter().enumerate() {
        if f.dim() != dim {
            return Err(Error::at(
                i,
                Error::DimensionMismatch {
                    expected: dim,
                    got: f.dim(),
                },
            ));
        }
        flat.extend_from_slice(f);
    }
    Ok(Array2::from_shape_vec((features.len(), dim), flat).expect("shape checked"))
}

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_rows(logits: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits / temperature;
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl MlpClassifier {
    /// Kaiming-style uniform init from `seed`: `sqrt(6 / fan_in)` bounds for
    /// layers feeding a ReLU, `1 / sqrt(fan_in)` for the logit layer, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::stream(seed, rng::STREAM_MODEL_INIT);
        let shapes = arch.layer_shapes();
        let last = shapes.len() - 1;
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(i, &(fan_in, fan_out))| {
                let bound = if i == last {
                    1.0 / (fan_in as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                let w = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    r.random_range(-bound..=bound)
                });
                Dense {
                    weights: w,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(MlpClassifier { arch, layers })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        Ok(MlpClassifier { arch, layers })
    }

    pub fn from_layers(arch: Architecture, layers: Vec<Dense>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        if shapes.len() != layers.len()
            || shapes
                .iter()
                .zip(&layers)
                .any(|(&(i, o), l)| l.weights.dim() != (i, o) || l.bias.len() != o)
        {
            return Err(Error::Format(
                "layer shapes do not match the architecture".into(),
            ));
        }
        Ok(MlpClassifier { arch, layers })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn num_outputs(&self) -> usize {
        self.arch.num_outputs
    }

    pub fn temperature(&self) -> f64 {
        self.arch.temperature
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<()> {
        let mut arch = self.arch.clone();
        arch.temperature = t;
        arch.validate()?;
        self.arch = arch;
        Ok(())
    }

    /// Parameter tensors in declared order: `W0, b0, W1, b1, ...`.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().unwrap(),
                    l.bias.as_slice_mut().unwrap(),
                ]
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights
                .iter()
                .chain(l.bias.iter())
                .any(|v| !v.is_finite())
            {
                return Err(Error::NonFinite(format!("parameters of layer {i}")));
            }
        }
        Ok(())
    }

    /// Activations of every layer; `acts[0]` is the input, the last entry the logits.
    fn forward_all(&self, x: Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&layer.weights) + &layer.bias;
            if i != last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Raw logits, `batch x num_outputs` (temperature not applied).
    pub fn forward(&self, features: &[FeatureVector]) -> Result<Array2<f64>> {
        self.check_finite()?;
        let x = to_matrix(features, self.arch.input_dim)?;
        Ok(self.forward_all(x).pop().unwrap())
    }

    /// Softmax of `logits / temperature`.
    pub fn probabilities(&self, features: &[FeatureVector]) -> Result<Array2<f64>> {
        Ok(softmax_rows(
            &self.forward(features)?,
            self.arch.temperature,
        ))
    }

    /// Argmax over the logits, lowest index on ties. No threshold.
    pub fn predict(&self, features: &[FeatureVector]) -> Result<Vec<usize>> {
        let logits = self.forward(features)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().unwrap()))
            .collect())
    }

    /// Mean temperature-scaled cross-entropy with analytic gradients.
    pub fn loss_and_grad(&self, batch: &[EmbeddedExample]) -> Result<LossOutput> {
        self.check_finite()?;
        let n_out = self.arch.num_outputs;
        if let Some(bad) = batch.iter().find(|e| e.label >= n_out) {
            return Err(Error::LabelOutOfRange {
                label: bad.label,
                num_classes: n_out,
            });
        }
        let n = batch.len();
        let mut flat = Vec::with_capacity(n * self.arch.input_dim);
        for (i, e) in batch.iter().enumerate() {
            if e.features.dim() != self.arch.input_dim {
                return Err(Error::at(
                    i,
                    Error::DimensionMismatch {
                        expected: self.arch.input_dim,
                        got: e.features.dim(),
                    },
                ));
            }
            flat.extend_from_slice(&e.features);
        }
        let x = Array2::from_shape_vec((n, self.arch.input_dim), flat).expect("shape checked");
        let acts = self.forward_all(x);
        let logits = acts.last().unwrap();
        let tau = self.arch.temperature;

        let mut loss_sum = 0.0;
        let mut correct = 0;
        // dL/dlogits = (softmax(z / tau) - onehot) / (tau * n)
        let mut delta = Array2::<f64>::zeros((n, n_out));
        for (i, (row, e)) in logits.rows().into_iter().zip(batch).enumerate() {
            let scaled: Vec<f64> = row.iter().map(|v| v / tau).collect();
            let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = scaled.iter().map(|s| (s - max).exp()).sum();
            let lse = max + sum.ln();
            let li = lse - scaled[e.label];
            if !li.is_finite() {
                return Err(Error::NonFinite(format!("loss of batch example {i}")));
            }
            loss_sum += li;
            if argmax(row.as_slice().unwrap()) == e.label {
                correct += 1;
            }
            let mut drow = delta.row_mut(i);
            for (j, s) in scaled.iter().enumerate() {
                let p = (s - lse).exp();
                let y = if j == e.label { 1.0 } else { 0.0 };
                drow[j] = (p - y) / (tau * n as f64);
            }
        }
        let loss = if n == 0 { 0.0 } else { loss_sum / n as f64 };

        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[i];
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            grads.push(Dense {
                weights: gw,
                bias: gb,
            });
            let mut d_in = delta.dot(&layer.weights.t());
            if i > 0 {
                // ReLU: gradient passes where the activation was positive.
                ndarray::Zip::from(&mut d_in).and(input).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = d_in;
        }
        grads.reverse();
        let input_grads = delta
            .rows()
            .into_iter()
            .map(|r| FeatureVector(r.to_vec()))
            .collect();
        Ok(LossOutput {
            report: LossReport {
                loss,
                correct,
                batch_size: n,
            },
            grads: Gradients { layers: grads },
            input_grads,
        })
    }

    /// Loss only.
    pub fn loss(&self, batch: &[EmbeddedExample]) -> Result<f64> {
        Ok(self.loss_and_grad(batch)?.report.loss)
    }
}

/// Applies one Adam update to every model parameter.
pub fn adam_step(
    model: &mut MlpClassifier,
    state: &mut AdamState,
    grads: &Gradients,
) -> Result<()> {
    let g = grads.slices();
    let mut p = model.params_mut();
    state.update(&mut p, &g)
}
