//! `OOSM` model checkpoints.
//!
//! Layout: magic `OOSM`, u32 version, u32 header length, a json header,
//! then the parameter payload as little-endian f64 in declared order:
//! for each layer its `fan_in x fan_out` weights (row-major) then its bias,
//! followed by the encoder's embedding table when it is trainable.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::baselines::MspModel;
use crate::classifier::{Architecture, Dense, MlpClassifier};
use crate::data::LabelSpace;
use crate::encoder::{Encoder, EncoderKind, EncoderSpec, HashedMeanEncoder};
use crate::error::{Error, Result};
use crate::evaluation::Predictor;

pub const MAGIC: &[u8; 4] = b"OOSM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ours,
    Msp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    dtype: String,
    architecture: Architecture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    known_classes: Vec<String>,
    encoder: EncoderSpec,
    encoder_seed: u64,
    encoder_state: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub model: MlpClassifier,
    pub threshold: Option<f64>,
    pub label_space: LabelSpace,
    pub encoder_spec: EncoderSpec,
    pub encoder_seed: u64,
    pub encoder_table: Option<Vec<f64>>,
}

fn trainable_table(encoder: &Encoder) -> Option<Vec<f64>> {
    match encoder {
        Encoder::HashedMean(h) if encoder.is_trainable() => Some(h.table().to_vec()),
        _ => None,
    }
}

impl Checkpoint {
    pub fn ours(
        model: &MlpClassifier,
        label_space: &LabelSpace,
        encoder: &Encoder,
        encoder_seed: u64,
    ) -> Self {
        Checkpoint {
            kind: ModelKind::Ours,
            model: model.clone(),
            threshold: None,
            label_space: label_space.clone(),
            encoder_spec: encoder.spec(),
            encoder_seed,
            encoder_table: trainable_table(encoder),
        }
    }

    pub fn msp(
        model: &MspModel,
        label_space: &LabelSpace,
        encoder: &Encoder,
        encoder_seed: u64,
    ) -> Self {
        Checkpoint {
            kind: ModelKind::Msp,
            model: model.classifier().clone(),
            threshold: Some(model.threshold()),
            label_space: label_space.clone(),
            encoder_spec: encoder.spec(),
            encoder_seed,
            encoder_table: trainable_table(encoder),
        }
    }

    /// K, the number of known classes.
    pub fn num_known(&self) -> usize {
        self.label_space.num_known()
    }

    /// Rebuilds the encoder, restoring the trained table when one was saved.
    pub fn encoder(&self) -> Result<Encoder> {
        match (&self.encoder_table, self.encoder_spec.kind) {
            (Some(table), EncoderKind::HashedMean) => {
                Ok(Encoder::HashedMean(HashedMeanEncoder::from_table(
                    self.encoder_spec.dim,
                    self.encoder_spec.hash_buckets,
                    self.encoder_spec.trainable,
                    table.clone(),
                )?))
            }
            _ => Encoder::build(&self.encoder_spec, self.encoder_seed),
        }
    }

    pub fn predictor(&self) -> Result<Box<dyn Predictor + Send + Sync>> {
        Ok(match self.kind {
            ModelKind::Ours => Box::new(self.model.clone()),
            ModelKind::Msp => Box::new(MspModel::new(
                self.model.clone(),
                self.threshold
                    .ok_or_else(|| Error::Format("msp checkpoint without threshold".into()))?,
            )?),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind,
            dtype: "f64".into(),
            architecture: self.model.architecture().clone(),
            threshold: self.threshold,
            known_classes: self.label_space.known_classes.clone(),
            encoder: self.encoder_spec.clone(),
            encoder_seed: self.encoder_seed,
            encoder_state: self.encoder_table.is_some(),
        };
        let json = serde_json::to_vec(&header).expect("serializable");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        let blobs = self
            .model
            .params()
            .into_iter()
            .chain(self.encoder_table.as_deref());
        for blob in blobs {
            for v in blob {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Format(format!(
                "checkpoint truncated: {} bytes",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(
                "checkpoint has wrong magic (expected OOSM)".into(),
            ));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < header_len {
            return Err(Error::Format("checkpoint truncated inside header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.dtype != "f64" {
            return Err(Error::Format(format!(
                "unsupported parameter dtype {:?}",
                header.dtype
            )));
        }
        header
            .architecture
            .validate()
            .map_err(|e| Error::Format(e.to_string()))?;
        let label_space = LabelSpace::new(header.known_classes.clone())?;
        let k = label_space.num_known();
        let expected_outputs = match header.kind {
            ModelKind::Ours => k + 1,
            ModelKind::Msp => k,
        };
        if header.architecture.num_outputs != expected_outputs {
            return Err(Error::Format(format!(
                "header declares {} outputs but {} known classes",
                header.architecture.num_outputs, k
            )));
        }

        let arch = &header.architecture;
        let mut dims = vec![arch.input_dim];
        dims.extend(&arch.hidden);
        dims.push(arch.num_outputs);
        let mut needed: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let table_len = header.encoder.dim * header.encoder.hash_buckets;
        if header.encoder_state {
            if header.encoder.kind != EncoderKind::HashedMean {
                return Err(Error::Format(
                    "encoder state stored for a stateless encoder".into(),
                ));
            }
            needed += table_len;
        }
        let payload = &body[header_len..];
        if payload.len() != needed * 8 {
            return Err(Error::Format(format!(
                "checkpoint payload is {} bytes, header shapes need {}",
                payload.len(),
                needed * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| values.by_ref().take(n).collect::<Vec<f64>>();
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                weights: Array2::from_shape_vec((w[0], w[1]), take(w[0] * w[1]))
                    .expect("length checked"),
                bias: Array1::from_vec(take(w[1])),
            })
            .collect();
        let model = MlpClassifier::from_layers(header.architecture.clone(), layers)?;
        let encoder_table = header.encoder_state.then(|| take(table_len));
        Ok(Checkpoint {
            kind: header.kind,
            model,
            threshold: header.threshold,
            label_space,
            encoder_spec: header.encoder,
            encoder_seed: header.encoder_seed,
            encoder_table,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
