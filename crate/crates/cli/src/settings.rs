//! Resolution of run settings: flags, then the json config file, then defaults.

use std::path::{Path, PathBuf};

use oos_core::data::{Content, Dataset, SplitResult};
use oos_core::encoder::{EncoderSpec, DEFAULT_HASHED_DIM, DEFAULT_HASH_BUCKETS};
use oos_core::experiment::Method;
use oos_core::trainer::TrainConfig;
use oos_core::{Error, Result};
use serde::Serialize;

use crate::args::{EncoderChoice, MethodChoice, RunOptions};

pub const DEFAULT_KNOWN_RATIO: f64 = 0.5;
pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

/// Where training examples come from.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// A fixed split on disk, shared by every seed.
    Split(PathBuf),
    /// A dataset re-split with each seed.
    Data {
        path: PathBuf,
        known_ratio: f64,
        val_fraction: f64,
    },
}

/// Fully resolved settings, recorded verbatim in the run manifest.
#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub method: Method,
    pub source: Source,
    pub open_pool: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub encoder: EncoderSpec,
    pub train: TrainConfig,
}

/// Parses `a..b` (inclusive), `a,b,c` or a single seed.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("seeds must look like 1..10 or 1,2,3, got {s:?}"));
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if seeds.is_empty() || sorted.len() != seeds.len() {
        return Err(bad());
    }
    Ok(seeds)
}

fn load_file(path: &Path) -> Result<RunOptions> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut opts: RunOptions = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    // Paths in a config file are relative to the file.
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [
        &mut opts.split,
        &mut opts.data,
        &mut opts.open_pool,
        &mut opts.embeddings,
    ]
    .into_iter()
    .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(opts)
}

macro_rules! merge {
    ($flags:expr, $file:expr, $($field:ident),*) => {
        RunOptions {
            config: None,
            $($field: $flags.$field.clone().or_else(|| $file.$field.clone()),)*
        }
    };
}

fn merged(flags: &RunOptions) -> Result<RunOptions> {
    let file = match &flags.config {
        Some(p) => load_file(p)?,
        None => RunOptions::default(),
    };
    let mut m = merge!(
        flags,
        file,
        split,
        data,
        open_pool,
        known_ratio,
        val_fraction,
        method,
        seed,
        seeds,
        encoder,
        dim,
        hash_buckets,
        trainable_encoder,
        embeddings,
        ratio,
        hidden,
        tau,
        lr,
        encoder_lr,
        patience,
        max_epochs
    );
    // A source or seed given on the command line replaces the file's choice
    // outright rather than combining with it.
    if flags.split.is_some() {
        m.data = None;
    } else if flags.data.is_some() {
        m.split = None;
    }
    if flags.seed.is_some() {
        m.seeds = None;
    } else if flags.seeds.is_some() {
        m.seed = None;
    }
    Ok(m)
}

/// Numeric dimension of the first example, for the identity encoder.
fn numeric_dim(ds: &Dataset) -> Option<usize> {
    ds.examples.first().and_then(|(u, _)| match &u.content {
        Content::Numeric(v) => Some(v.len()),
        Content::Text(_) => None,
    })
}

impl Settings {
    /// `sample` is any dataset from the source, used to infer the identity
    /// encoder's dimension when `--dim` is absent.
    pub fn resolve(
        flags: &RunOptions,
        sample: impl FnOnce(&Source) -> Result<Dataset>,
    ) -> Result<Self> {
        let o = merged(flags)?;
        let source = match (o.split, o.data) {
            (Some(dir), None) => Source::Split(dir),
            (None, Some(path)) => Source::Data {
                path,
                known_ratio: o.known_ratio.unwrap_or(DEFAULT_KNOWN_RATIO),
                val_fraction: o.val_fraction.unwrap_or(DEFAULT_VAL_FRACTION),
            },
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "give either a split or a dataset, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config("one of --split or --data is required".into()))
            }
        };
        let seeds = match (o.seed, o.seeds) {
            (Some(s), None) => vec![s],
            (None, Some(s)) => parse_seeds(&s)?,
            (None, None) => vec![0],
            (Some(_), Some(_)) => {
                return Err(Error::Config("--seed and --seeds are exclusive".into()))
            }
        };

        let defaults = TrainConfig::default();
        let train = TrainConfig {
            ratio: o.ratio.unwrap_or(defaults.ratio),
            hidden: o.hidden.unwrap_or(defaults.hidden),
            temperature: o.tau.unwrap_or(defaults.temperature),
            lr: o.lr.unwrap_or(defaults.lr),
            encoder_lr: o.encoder_lr.unwrap_or(defaults.encoder_lr),
            max_epochs: o.max_epochs.unwrap_or(defaults.max_epochs),
            patience: o.patience.unwrap_or(defaults.patience),
            seed: seeds[0],
            ..defaults
        };
        train.validate()?;

        let encoder = match o.encoder.unwrap_or(EncoderChoice::Hashed) {
            EncoderChoice::Identity => {
                let dim = match o.dim {
                    Some(d) => d,
                    None => numeric_dim(&sample(&source)?).ok_or_else(|| {
                        Error::Config(
                            "identity encoder needs numeric data or an explicit --dim".into(),
                        )
                    })?,
                };
                EncoderSpec::identity(dim)
            }
            EncoderChoice::Hashed => EncoderSpec::hashed_mean(
                o.dim.unwrap_or(DEFAULT_HASHED_DIM),
                o.hash_buckets.unwrap_or(DEFAULT_HASH_BUCKETS),
                o.trainable_encoder.unwrap_or(false),
            ),
            EncoderChoice::Precomputed => {
                let path = o.embeddings.ok_or_else(|| {
                    Error::Config("precomputed encoder needs --embeddings".into())
                })?;
                let dim = oos_core::oose::read(&path)?.0.dim;
                if let Some(d) = o.dim.filter(|&d| d != dim) {
                    return Err(Error::Config(format!(
                        "--dim {d} but {} holds dim {dim}",
                        path.display()
                    )));
                }
                EncoderSpec::precomputed(path, dim)
            }
        };
        encoder.validate()?;
        if o.open_pool.is_none() {
            if o.method == Some(MethodChoice::Msp) {
                return Err(Error::Config("msp calibration needs --open-pool".into()));
            }
            if train.ratio.open > 0 {
                return Err(Error::Config(format!(
                    "ratio {} draws open-domain outliers; pass --open-pool",
                    train.ratio
                )));
            }
        }

        Ok(Settings {
            method: o.method.unwrap_or(MethodChoice::Ours).into(),
            source,
            open_pool: o.open_pool,
            seeds,
            encoder,
            train,
        })
    }
}

/// Reads the split directory, or loads and splits the dataset with `seed`.
pub fn split_for_seed(
    source: &Source,
    dataset: Option<&Dataset>,
    seed: u64,
) -> Result<SplitResult> {
    match source {
        Source::Split(dir) => SplitResult::read(dir),
        Source::Data {
            known_ratio,
            val_fraction,
            ..
        } => oos_core::data::split_known_unknown(
            dataset.expect("dataset loaded for a data source"),
            &oos_core::data::SplitSpec::new(*known_ratio, seed),
            *val_fraction,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1..10").unwrap(), (1..=10).collect::<Vec<_>>());
        assert_eq!(parse_seeds("3, 1,2").unwrap(), vec![3, 1, 2]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert!(parse_seeds("5..2").is_err());
        assert!(parse_seeds("1,1").is_err());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"data": "d.jsonl", "open_pool": "p.jsonl", "lr": 0.5, "patience": 9, "encoder": "identity", "dim": 2, "seeds": "1..3"}"#)
            .unwrap();
        let flags = RunOptions {
            config: Some(cfg),
            lr: Some(0.25),
            ..Default::default()
        };
        let s = Settings::resolve(&flags, |_| unreachable!("dim is explicit")).unwrap();
        assert_eq!(s.train.lr, 0.25);
        assert_eq!(s.train.patience, 9);
        assert_eq!(s.train.max_epochs, TrainConfig::default().max_epochs);
        assert_eq!(s.seeds, vec![1, 2, 3]);
        assert_eq!(s.open_pool, Some(dir.path().join("p.jsonl")));
        match s.source {
            Source::Data { path, .. } => assert_eq!(path, dir.path().join("d.jsonl")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn command_line_seed_replaces_file_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"data": "d.jsonl", "encoder": "identity", "dim": 2, "seeds": "1..3", "ratio": "10:0:5"}"#).unwrap();
        let flags = RunOptions {
            config: Some(cfg),
            seed: Some(8),
            ..Default::default()
        };
        let s = Settings::resolve(&flags, |_| unreachable!()).unwrap();
        assert_eq!(s.seeds, vec![8]);
        assert_eq!(s.train.ratio.synthetic, 5);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"learning_rate": 0.1}"#).unwrap();
        let flags = RunOptions {
            config: Some(cfg),
            ..Default::default()
        };
        assert!(matches!(
            Settings::resolve(&flags, |_| unreachable!()),
            Err(Error::Config(_))
        ));
    }
}
