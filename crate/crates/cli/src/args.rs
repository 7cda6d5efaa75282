use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use oos_core::experiment::Method;
use oos_core::outliers::BatchRatio;
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(
    name = "oos",
    version,
    about = "Out-of-scope intent detection experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Split a labeled dataset into known-class train/validation and a test set with held-out classes.
    Split(SplitArgs),
    /// Train one model per seed, evaluate it on the test split and write a run manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a test split.
    Eval(EvalArgs),
    /// Encode a split with a checkpoint's encoder and write the features as an OOSE file.
    ExportEmbeddings(ExportArgs),
    /// Train over a list of synthetic-outlier counts and write one CSV row per count.
    Sweep(SweepArgs),
    /// Write the 2-D Gaussian blob benchmark, its open pool and a matching config.
    Blobs(BlobsArgs),
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub known_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of each known class's remaining examples kept for validation.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Fraction of each known class reserved for the test set.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderChoice {
    Identity,
    Hashed,
    Precomputed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    Ours,
    Msp,
}

impl From<MethodChoice> for Method {
    fn from(m: MethodChoice) -> Self {
        match m {
            MethodChoice::Ours => Method::Ours,
            MethodChoice::Msp => Method::Msp,
        }
    }
}

/// Settings shared by `train` and `sweep`. Every field may also come from
/// the `--config` json file; flags win.
#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    /// Json file with any of these settings, keyed by the flag name in snake_case.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// A directory written by `split`. Mutually exclusive with --data.
    #[arg(long, conflicts_with = "data")]
    pub split: Option<PathBuf>,
    /// A labeled dataset, split afresh for every seed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSONL of unlabeled utterances from other domains, drawn as open-domain outliers.
    #[arg(long)]
    pub open_pool: Option<PathBuf>,
    #[arg(long)]
    pub known_ratio: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long, value_enum)]
    pub method: Option<MethodChoice>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Inclusive range `a..b` or a comma list.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long, value_enum)]
    pub encoder: Option<EncoderChoice>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub hash_buckets: Option<usize>,
    /// Train the hashed encoder's embedding table along with the classifier.
    #[arg(long)]
    pub trainable_encoder: Option<bool>,
    /// OOSE file for the precomputed encoder.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Batch ratio `inliers:open:synthetic`.
    #[arg(long)]
    #[serde(with = "ratio_text")]
    pub ratio: Option<BatchRatio>,
    /// Comma-separated hidden layer widths.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Softmax temperature applied to the logits during training.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub encoder_lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "compare", conflicts_with = "compare")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate two checkpoints and print the per-metric difference.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub compare: Option<Vec<PathBuf>>,
    /// A directory written by `split`.
    #[arg(long)]
    pub split: PathBuf,
    /// Also print the confusion matrix.
    #[arg(long)]
    pub confusion: bool,
    /// Write the json report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub part: SplitPart,
    /// Output OOSE file; the row sidecar goes next to it with a .jsonl extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunOptions,
    /// Synthetic outliers per batch, one CSV row each.
    #[arg(long, value_delimiter = ',', default_value = "0,10,50,200,400")]
    pub synthetic: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BlobsArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Batch ratios appear in config files in their flag form, `"100:100:400"`.
mod ratio_text {
    use oos_core::outliers::BatchRatio;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Option<BatchRatio>, s: S) -> Result<S::Ok, S::Error> {
        match r {
            Some(r) => s.collect_str(r),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<BatchRatio>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|t| t.parse().map_err(serde::de::Error::custom))
            .transpose()
    }
}
