use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use oos_core::bench::{self, BlobConfig};
use oos_core::checkpoint::Checkpoint;
use oos_core::data::{
    load_dataset, load_open_pool, split_known_unknown, write_dataset_jsonl, write_pool_jsonl,
    DataFormat, Dataset, SplitPaths, SplitResult, SplitSpec, Utterance,
};
use oos_core::evaluation::{evaluate, MetricsReport};
use oos_core::experiment::{aggregate, run_on_split, Aggregate, RunOutput, Scores};
use oos_core::oose::{self, EmbeddingMatrix, RowEntry};
use oos_core::outliers::BatchRatio;
use oos_core::{Error, Result};
use rayon::prelude::*;

use crate::args::{
    BlobsArgs, EvalArgs, ExportArgs, RunOptions, SplitArgs, SplitPart, SweepArgs, TrainArgs,
};
use crate::manifest::{sha256_file, RunManifest, SeedEntry};
use crate::settings::{split_for_seed, Settings, Source};

/// Writes to stdout. A closed pipe, as in `oos eval ... | head`, ends the
/// process quietly instead of panicking.
fn emit(text: &str) {
    use std::io::Write as _;
    if let Err(e) = std::io::stdout().lock().write_all(text.as_bytes()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        log::warn!("writing to stdout: {e}");
    }
}

macro_rules! say {
    ($($t:tt)*) => {
        emit(&format!("{}\n", format_args!($($t)*)))
    };
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pretty_json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

pub fn split(args: &SplitArgs) -> Result<()> {
    let dataset = load_dataset(&args.data, DataFormat::from_path(&args.data))?;
    let spec = SplitSpec {
        test_fraction: args.test_fraction,
        ..SplitSpec::new(args.known_ratio, args.seed)
    };
    let split = split_known_unknown(&dataset, &spec, args.val_fraction)?;
    split.write(&args.out)?;
    let k = split.label_space.num_known();
    let oos = split.test.iter().filter(|t| t.target == k).count();
    say!(
        "{} classes, {k} known; train {}, validation {}, test {} ({oos} out of scope) -> {}",
        dataset.class_names.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        args.out.display()
    );
    Ok(())
}

/// Inputs loaded once and shared by every seed.
struct Inputs {
    settings: Settings,
    dataset: Option<Dataset>,
    fixed_split: Option<SplitResult>,
    pool: Vec<Utterance>,
}

impl Inputs {
    fn load(opts: &RunOptions) -> Result<Self> {
        let mut dataset = None;
        let settings = Settings::resolve(opts, |source| match source {
            Source::Split(dir) => load_dataset(&SplitPaths::in_dir(dir).train, DataFormat::Jsonl),
            Source::Data { path, .. } => {
                let ds = load_dataset(path, DataFormat::from_path(path))?;
                dataset = Some(ds.clone());
                Ok(ds)
            }
        })?;
        let (dataset, fixed_split) = match &settings.source {
            Source::Split(dir) => (None, Some(SplitResult::read(dir)?)),
            Source::Data { path, .. } => match dataset {
                Some(ds) => (Some(ds), None),
                None => (Some(load_dataset(path, DataFormat::from_path(path))?), None),
            },
        };
        let pool = match &settings.open_pool {
            Some(p) => load_open_pool(p)?,
            None => Vec::new(),
        };
        Ok(Inputs {
            settings,
            dataset,
            fixed_split,
            pool,
        })
    }

    fn fingerprints(&self) -> Result<BTreeMap<String, String>> {
        let mut files: Vec<(String, PathBuf)> = Vec::new();
        match &self.settings.source {
            Source::Split(dir) => {
                let p = SplitPaths::in_dir(dir);
                for (name, path) in [
                    ("split/train", p.train),
                    ("split/validation", p.validation),
                    ("split/test", p.test),
                    ("split/label_space", p.label_space),
                ] {
                    files.push((name.into(), path));
                }
            }
            Source::Data { path, .. } => files.push(("data".into(), path.clone())),
        }
        if let Some(p) = &self.settings.open_pool {
            files.push(("open_pool".into(), p.clone()));
        }
        if let Some(p) = &self.settings.encoder.manifest_path {
            files.push(("embeddings".into(), p.clone()));
        }
        files
            .into_iter()
            .map(|(name, path)| Ok((name, sha256_file(&path)?)))
            .collect()
    }

    /// Trains and evaluates every seed, in parallel, returning results in seed order.
    fn run(&self, ratio: BatchRatio) -> Result<Vec<RunOutput>> {
        let s = &self.settings;
        s.seeds
            .par_iter()
            .map(|&seed| {
                let split = match &self.fixed_split {
                    Some(split) => split.clone(),
                    None => split_for_seed(&s.source, self.dataset.as_ref(), seed)?,
                };
                let config = oos_core::trainer::TrainConfig {
                    seed,
                    ratio,
                    ..s.train.clone()
                };
                log::info!("seed {seed}: training");
                run_on_split(s.method, &config, &split, &self.pool, &s.encoder)
                    .inspect_err(|e| log::error!("seed {seed}: {e}"))
            })
            .collect()
    }
}

fn score_line(label: &str, s: &Scores) -> String {
    format!(
        "{label}: accuracy {:.4}  macro-F1 {:.4}  known macro-F1 {:.4}  unknown F1 {:.4}",
        s.accuracy, s.macro_f1_all, s.macro_f1_known, s.f1_unknown
    )
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let inputs = Inputs::load(&args.run)?;
    let s = &inputs.settings;
    let outputs = inputs.run(s.train.ratio)?;
    create_dir(&args.out)?;

    let mut runs = Vec::with_capacity(outputs.len());
    for out in &outputs {
        let rel = format!("seed-{}", out.seed);
        let dir = args.out.join(&rel);
        create_dir(&dir)?;
        out.checkpoint.save(&dir.join("model.oosm"))?;
        out.history.write_jsonl(&dir.join("history.jsonl"))?;
        write_text(&dir.join("metrics.json"), &pretty_json(&out.metrics))?;
        let scores = Scores::from(&out.metrics);
        say!("{}", score_line(&format!("seed {}", out.seed), &scores));
        runs.push(SeedEntry {
            seed: out.seed,
            checkpoint: format!("{rel}/model.oosm"),
            history: format!("{rel}/history.jsonl"),
            metrics: format!("{rel}/metrics.json"),
            epochs: out.history.epochs.len(),
            best_epoch: out.history.best_epoch,
            scores,
        });
    }
    let agg = aggregate(&runs.iter().map(|r| r.scores).collect::<Vec<_>>());
    print_aggregate(&agg);
    let mut settings = serde_json::to_value(s).expect("serializable");
    // Each run carries its own seed; the template's is meaningless here.
    if let Some(t) = settings.get_mut("train").and_then(|t| t.as_object_mut()) {
        t.remove("seed");
    }
    let manifest = RunManifest {
        settings,
        seeds: s.seeds.clone(),
        fingerprints: inputs.fingerprints()?,
        runs,
        aggregate: agg,
    };
    manifest.write(&args.out.join("manifest.json"))
}

fn print_aggregate(agg: &Aggregate) {
    if agg.runs > 1 {
        say!(
            "{}",
            score_line(&format!("mean of {}", agg.runs), &agg.mean)
        );
        say!("{}", score_line("std", &agg.std));
    }
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    if args.synthetic.is_empty() {
        return Err(Error::Config("--synthetic needs at least one count".into()));
    }
    let inputs = Inputs::load(&args.run)?;
    let base = inputs.settings.train.ratio;
    let mut wtr = csv::Writer::from_path(&args.out).map_err(|e| csv_err(&args.out, e))?;
    wtr.write_record([
        "synthetic",
        "inliers",
        "open",
        "runs",
        "accuracy_mean",
        "accuracy_std",
        "macro_f1_all_mean",
        "macro_f1_all_std",
        "macro_f1_known_mean",
        "macro_f1_known_std",
        "f1_unknown_mean",
        "f1_unknown_std",
    ])
    .map_err(|e| csv_err(&args.out, e))?;
    for &m in &args.synthetic {
        let ratio = BatchRatio {
            synthetic: m,
            ..base
        };
        let outputs = inputs.run(ratio)?;
        let agg = aggregate(
            &outputs
                .iter()
                .map(|o| Scores::from(&o.metrics))
                .collect::<Vec<_>>(),
        );
        say!("{}", score_line(&format!("synthetic {m}"), &agg.mean));
        let mut row = vec![
            m.to_string(),
            ratio.inliers.to_string(),
            ratio.open.to_string(),
            agg.runs.to_string(),
        ];
        for (mean, std) in [
            (agg.mean.accuracy, agg.std.accuracy),
            (agg.mean.macro_f1_all, agg.std.macro_f1_all),
            (agg.mean.macro_f1_known, agg.std.macro_f1_known),
            (agg.mean.f1_unknown, agg.std.f1_unknown),
        ] {
            row.push(mean.to_string());
            row.push(std.to_string());
        }
        wtr.write_record(&row).map_err(|e| csv_err(&args.out, e))?;
    }
    wtr.flush().map_err(|e| Error::io(&args.out, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::InvalidData(format!("{}: {e}", path.display()))
}

fn evaluate_checkpoint(path: &Path, split: &SplitResult) -> Result<MetricsReport> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.label_space != split.label_space {
        return Err(Error::Mismatch(format!(
            "{} was trained on K = {} known classes {:?}, but the split has K = {} {:?}",
            path.display(),
            ckpt.num_known(),
            ckpt.label_space.known_classes,
            split.label_space.num_known(),
            split.label_space.known_classes
        )));
    }
    evaluate(ckpt.predictor()?.as_ref(), &ckpt.encoder()?, &split.test)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let split = SplitResult::read(&args.split)?;
    let mut text = String::new();
    let json = if let Some([a, b]) = args.compare.as_deref() {
        let ra = evaluate_checkpoint(a, &split)?;
        let rb = evaluate_checkpoint(b, &split)?;
        let (sa, sb) = (Scores::from(&ra), Scores::from(&rb));
        let delta = Scores {
            accuracy: sa.accuracy - sb.accuracy,
            macro_f1_all: sa.macro_f1_all - sb.macro_f1_all,
            macro_f1_known: sa.macro_f1_known - sb.macro_f1_known,
            f1_unknown: sa.f1_unknown - sb.f1_unknown,
        };
        let _ = writeln!(text, "{:<16} {:>8} {:>8} {:>8}", "metric", "A", "B", "A-B");
        for (name, x, y, d) in [
            ("accuracy", sa.accuracy, sb.accuracy, delta.accuracy),
            (
                "macro_f1_all",
                sa.macro_f1_all,
                sb.macro_f1_all,
                delta.macro_f1_all,
            ),
            (
                "macro_f1_known",
                sa.macro_f1_known,
                sb.macro_f1_known,
                delta.macro_f1_known,
            ),
            ("f1_unknown", sa.f1_unknown, sb.f1_unknown, delta.f1_unknown),
        ] {
            let _ = writeln!(text, "{name:<16} {x:>8.4} {y:>8.4} {d:>+8.4}");
        }
        if args.confusion {
            let _ = write!(
                text,
                "\nA\n{}\nB\n{}",
                ra.confusion.pretty(),
                rb.confusion.pretty()
            );
        }
        serde_json::json!({ "a": ra, "b": rb, "delta": delta })
    } else {
        let path = args
            .checkpoint
            .as_ref()
            .expect("clap requires a checkpoint");
        let report = evaluate_checkpoint(path, &split)?;
        if args.confusion {
            text += &report.confusion.pretty();
        }
        serde_json::to_value(&report).expect("serializable")
    };
    let json = pretty_json(&json);
    match &args.out {
        Some(p) => write_text(p, &json)?,
        None => emit(&json),
    }
    emit(&text);
    Ok(())
}

pub fn export_embeddings(args: &ExportArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let split = SplitResult::read(&args.split)?;
    let examples: Vec<(Utterance, String)> = match args.part {
        SplitPart::Train => split.train.examples,
        SplitPart::Validation => split.validation.examples,
        SplitPart::Test => split
            .test
            .into_iter()
            .map(|t| (t.utterance, t.source_label))
            .collect(),
    };
    let encoder = ckpt.encoder()?;
    let utts: Vec<Utterance> = examples.iter().map(|(u, _)| u.clone()).collect();
    let features = encoder.encode_batch(&utts)?;
    let matrix = EmbeddingMatrix {
        dim: encoder.dim(),
        values: features
            .iter()
            .flat_map(|f| f.iter().map(|&v| v as f32))
            .collect(),
    };
    let rows: Vec<RowEntry> = examples
        .into_iter()
        .enumerate()
        .map(|(row, (u, label))| RowEntry {
            row,
            id: u.id,
            label: Some(label),
        })
        .collect();
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    oose::write(&args.out, &matrix, &rows)?;
    say!(
        "{} x {} -> {}",
        matrix.count(),
        matrix.dim,
        args.out.display()
    );
    Ok(())
}

pub fn blobs(args: &BlobsArgs) -> Result<()> {
    let cfg = BlobConfig {
        seed: args.seed,
        ..BlobConfig::default()
    };
    create_dir(&args.out)?;
    write_dataset_jsonl(&bench::gaussian_blobs(&cfg), &args.out.join("blobs.jsonl"))?;
    write_pool_jsonl(&bench::open_pool(&cfg), &args.out.join("pool.jsonl"))?;
    let t = bench::train_config();
    let run = RunOptions {
        data: Some("blobs.jsonl".into()),
        open_pool: Some("pool.jsonl".into()),
        known_ratio: Some(bench::KNOWN_RATIO),
        val_fraction: Some(bench::VAL_FRACTION),
        seeds: Some("1..10".into()),
        encoder: Some(crate::args::EncoderChoice::Identity),
        dim: Some(2),
        ratio: Some(t.ratio),
        hidden: Some(t.hidden),
        tau: Some(t.temperature),
        lr: Some(t.lr),
        patience: Some(t.patience),
        max_epochs: Some(t.max_epochs),
        ..RunOptions::default()
    };
    let mut value = serde_json::to_value(&run).expect("serializable");
    if let serde_json::Value::Object(map) = &mut value {
        map.retain(|_, v| !v.is_null());
    }
    write_text(&args.out.join("config.json"), &pretty_json(&value))?;
    say!(
        "{} classes x {} points, {} pool points -> {}",
        cfg.classes,
        cfg.per_class,
        cfg.pool_size,
        args.out.display()
    );
    Ok(())
}
