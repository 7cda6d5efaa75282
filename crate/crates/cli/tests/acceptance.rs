//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero if any fails.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use oos_core::bench::{self, BlobConfig};
use oos_core::checkpoint::Checkpoint;
use oos_core::data::{split_known_unknown, Dataset, LabelSpace, SplitSpec, Utterance};
use oos_core::encoder::{Encoder, EncoderSpec, FeatureVector};
use oos_core::evaluation::{compute_metrics, ConfusionMatrix};
use oos_core::experiment::{aggregate, run_seed, Aggregate, Method, Scores};
use oos_core::oose::{self, EmbeddingMatrix, RowEntry};
use oos_core::outliers::{compose_batch, synthesize_outliers_traced, BatchRatio, EmbeddedExample};
use oos_core::rng;
use oos_core::trainer::{train, TrainConfig};
use oos_testkit::gradcheck::{check, random_case};
use oos_testkit::ks::{ks_critical_1pct, ks_uniform};
use oos_testkit::metrics::brute_force;
use rand::Rng;

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-6;
const GRAD_BUDGET_SECS: f64 = 10.0;
const CONVEX_SAMPLES: usize = 100_000;
const METRIC_TOLERANCE: f64 = 1e-12;
const DIRECTIONAL_F1_GAP: f64 = 0.10;
const DIRECTIONAL_ACC_GAP: f64 = 0.05;
const DIRECTIONAL_BUDGET_SECS: f64 = 300.0;
const SWEEP_COUNTS: [usize; 5] = [0, 10, 50, 200, 400];
/// A sweep step may dip by at most this much and still count as non-decreasing.
const SWEEP_TOLERANCE: f64 = 0.01;
const SEEDS: std::ops::RangeInclusive<u64> = 1..=10;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn gradient_oracle(r: &mut Report) {
    let t0 = Instant::now();
    let (mut head, mut table, mut n, mut entries) = (0.0f64, 0.0f64, 0, 0);
    for seed in 0..24 {
        for detach in [false, true] {
            let g = check(&random_case(seed, detach), GRAD_STEP);
            head = head.max(g.head);
            table = table.max(g.table);
            entries += g.entries_checked;
            n += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    r.line(
        "gradient oracle",
        n >= 20 && head < GRAD_TOLERANCE && table < GRAD_TOLERANCE && secs < GRAD_BUDGET_SECS,
        format!(
            "{n} configs, {entries} parameters; max rel err head {head:.1e}, table {table:.1e} (< {GRAD_TOLERANCE:.0e}); {secs:.2} s (< {GRAD_BUDGET_SECS} s)"
        ),
    );
}

fn convexity(r: &mut Report) {
    let mut data_rng = rng::stream(42, 0);
    let mut by_class = BTreeMap::new();
    for c in 0..5 {
        let feats: Vec<FeatureVector> = (0..40)
            .map(|_| {
                FeatureVector(
                    (0..8)
                        .map(|_| data_rng.random_range(-100.0..100.0))
                        .collect(),
                )
            })
            .collect();
        by_class.insert(c, feats);
    }
    let out = synthesize_outliers_traced(&by_class, CONVEX_SAMPLES, &mut rng::stream(42, 1))
        .expect("two classes");
    let violations = out
        .iter()
        .filter(|s| {
            let a = &by_class[&s.alpha.0][s.alpha.1];
            let b = &by_class[&s.beta.0][s.beta.1];
            s.alpha.0 == s.beta.0
                || (0..a.len())
                    .any(|i| s.features[i] < a[i].min(b[i]) || s.features[i] > a[i].max(b[i]))
        })
        .count();
    let thetas: Vec<f64> = out.iter().map(|s| s.theta).collect();
    let d = ks_uniform(&thetas);
    let crit = ks_critical_1pct(thetas.len());
    r.line(
        "convexity",
        out.len() == CONVEX_SAMPLES && violations == 0 && d < crit,
        format!(
            "{} outliers, {violations} outside parent bounds; theta KS D = {d:.5} (1% critical {crit:.5})",
            out.len()
        ),
    );
}

fn metric_oracle(r: &mut Report) {
    let mut g = rng::stream(7, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = g.random_range(1..=8);
        let mut cm = ConfusionMatrix::zeros(k);
        for c in cm.counts.iter_mut().flatten() {
            *c = if g.random_bool(0.3) {
                0
            } else {
                g.random_range(0..50)
            };
        }
        cm.counts[0][0] += 1;
        let m = compute_metrics(&cm).expect("nonempty");
        let o = brute_force(&cm.counts);
        let pairs = [
            (m.accuracy, o.accuracy),
            (m.macro_f1_all, o.macro_f1_all),
            (m.macro_f1_known, o.macro_f1_known),
            (m.f1_unknown, o.f1_unknown),
        ];
        for (a, b) in pairs
            .into_iter()
            .chain(m.per_class_f1.iter().copied().zip(o.per_class_f1))
        {
            worst = worst.max((a - b).abs());
        }
    }
    let hand = compute_metrics(&ConfusionMatrix {
        counts: vec![vec![1, 1], vec![1, 1]],
    })
    .expect("nonempty")
    .macro_f1_all;
    r.line(
        "metric oracle",
        worst < METRIC_TOLERANCE && (hand - 0.5).abs() < METRIC_TOLERANCE,
        format!("100 random matrices, max deviation {worst:.1e} (< {METRIC_TOLERANCE:.0e}); [[1,1],[1,1]] macro-F1 {hand}"),
    );
}

fn batch_contract(r: &mut Report, dataset: &Dataset, pool: &[Utterance]) {
    let ratio = BatchRatio::default();
    // Direct composition over many 100-inlier batches.
    let mut g = rng::stream(3, 0);
    let pool_feats: Vec<FeatureVector> = (0..50)
        .map(|i| FeatureVector(vec![i as f64, -1.0]))
        .collect();
    let mut direct_ok = true;
    for _ in 0..200 {
        let inliers: Vec<EmbeddedExample> = (0..ratio.inliers)
            .map(|i| {
                EmbeddedExample::new(
                    vec![g.random(), g.random()],
                    if i < 2 { i } else { g.random_range(0..4) },
                )
            })
            .collect();
        let b = compose_batch(&inliers, &pool_feats, &ratio, 4, &mut g).expect("composable");
        let outliers = &b.examples[ratio.inliers..];
        direct_ok &= b.counts == ratio
            && outliers.len() == 500
            && outliers.iter().all(|e| e.label == 4)
            && b.provenance[ratio.inliers..ratio.inliers + 100]
                .iter()
                .all(|p| matches!(p, oos_core::outliers::Provenance::Open { .. }))
            && b.provenance[ratio.inliers + 100..]
                .iter()
                .all(|p| matches!(p, oos_core::outliers::Provenance::Synthetic { .. }));
    }

    // Inside training: per-epoch totals and the synthetic trace.
    let dir = tempfile::tempdir().expect("tempdir");
    let trace = dir.path().join("trace.jsonl");
    let split = split_known_unknown(
        dataset,
        &SplitSpec::new(bench::KNOWN_RATIO, 1),
        bench::VAL_FRACTION,
    )
    .expect("bench splits");
    let cfg = TrainConfig {
        max_epochs: 3,
        seed: 1,
        trace_path: Some(trace.clone()),
        ..bench::train_config()
    };
    let out = train(&cfg, &split, pool, &EncoderSpec::identity(2)).expect("trains");
    let epochs_ok =
        out.history.epochs.iter().all(|e| {
            e.open == ratio.open * e.batches && e.synthetic == ratio.synthetic * e.batches
        });
    let mut per_batch: HashMap<String, usize> = HashMap::new();
    for line in std::fs::read_to_string(&trace)
        .expect("trace written")
        .lines()
    {
        let v: serde_json::Value = serde_json::from_str(line).expect("jsonl");
        *per_batch
            .entry(v["batch"].as_str().expect("batch id").to_string())
            .or_default() += 1;
    }
    let batches: usize = out.history.epochs.iter().map(|e| e.batches).sum();
    let trace_ok = per_batch.len() == batches && per_batch.values().all(|&n| n == ratio.synthetic);
    r.line(
        "batch composition",
        direct_ok && epochs_ok && trace_ok,
        format!(
            "200 composed batches of 100 inliers each carry 100 open + 400 synthetic labeled K; {batches} training batches traced with 400 synthetic each"
        ),
    );
}

fn feasibility(r: &mut Report) {
    r.line(
        "feasibility statement",
        true,
        "absolute benchmark scores of the pretrained-transformer setting (e.g. 88.44 accuracy / 80.73 macro-F1) are not reproducible at desk scale without that encoder; the directional checks below stand in for them".into(),
    );
}

struct Bench {
    dataset: Dataset,
    pool: Vec<Utterance>,
}

impl Bench {
    fn new() -> Self {
        let cfg = BlobConfig::default();
        Bench {
            dataset: bench::gaussian_blobs(&cfg),
            pool: bench::open_pool(&cfg),
        }
    }

    fn run(&self, method: Method, ratio: BatchRatio) -> Aggregate {
        let cfg = TrainConfig {
            ratio,
            ..bench::train_config()
        };
        let scores: Vec<Scores> = SEEDS
            .map(|seed| {
                let out = run_seed(
                    method,
                    &cfg,
                    &self.dataset,
                    &self.pool,
                    bench::KNOWN_RATIO,
                    bench::VAL_FRACTION,
                    &EncoderSpec::identity(2),
                    seed,
                )
                .expect("bench run");
                Scores::from(&out.metrics)
            })
            .collect();
        aggregate(&scores)
    }
}

fn ratio(i: usize, o: usize, s: usize) -> BatchRatio {
    BatchRatio::new(i, o, s).expect("valid ratio")
}

fn directional(r: &mut Report, b: &Bench) -> Aggregate {
    let t0 = Instant::now();
    let ours = b.run(Method::Ours, BatchRatio::default());
    let msp = b.run(Method::Msp, BatchRatio::default());
    let secs = t0.elapsed().as_secs_f64();
    let df1 = ours.mean.f1_unknown - msp.mean.f1_unknown;
    let dacc = ours.mean.accuracy - msp.mean.accuracy;
    r.line(
        "directional vs MSP",
        df1 >= DIRECTIONAL_F1_GAP && dacc >= DIRECTIONAL_ACC_GAP && secs < DIRECTIONAL_BUDGET_SECS,
        format!(
            "10 seeds; unknown F1 {:.3} vs {:.3} (gap {:+.3}, need {DIRECTIONAL_F1_GAP}); accuracy {:.3} vs {:.3} (gap {:+.3}, need {DIRECTIONAL_ACC_GAP}); {secs:.1} s single-threaded (< {DIRECTIONAL_BUDGET_SECS} s)",
            ours.mean.f1_unknown, msp.mean.f1_unknown, df1, ours.mean.accuracy, msp.mean.accuracy, dacc
        ),
    );
    ours
}

fn ablation(r: &mut Report, b: &Bench, both: &Aggregate) {
    let syn = b.run(Method::Ours, ratio(100, 0, 400));
    let open = b.run(Method::Ours, ratio(100, 100, 0));
    let (fb, fs, fo) = (
        both.mean.f1_unknown,
        syn.mean.f1_unknown,
        open.mean.f1_unknown,
    );
    r.line(
        "ablation ordering",
        fs > fo && fb > fs && fb > fo,
        format!(
            "unknown F1 over 10 seeds: both {fb:.4}, synthetic only {fs:.4}, open only {fo:.4}; margins both-syn {:+.4}, syn-open {:+.4}",
            fb - fs,
            fs - fo
        ),
    );
}

fn oos_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_oos"))
}

fn run_cli(args: &[&str]) -> std::process::Output {
    let out = oos_bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn sweep(r: &mut Report, bench_dir: &Path, out_dir: &Path) {
    let csv_path = out_dir.join("acceptance-sweep.csv");
    let counts = SWEEP_COUNTS.map(|c| c.to_string()).join(",");
    run_cli(&[
        "sweep",
        "--config",
        p(&bench_dir.join("config.json")),
        "--ratio",
        "100:0:0",
        "--synthetic",
        &counts,
        "--out",
        p(&csv_path),
    ]);
    let mut rdr = csv::Reader::from_path(&csv_path).expect("csv written");
    let headers = rdr.headers().expect("header").clone();
    let col = headers
        .iter()
        .position(|h| h == "f1_unknown_mean")
        .expect("column");
    let f1: Vec<f64> = rdr
        .records()
        .map(|rec| rec.expect("row")[col].parse().expect("float"))
        .collect();
    let monotone = f1.windows(2).all(|w| w[1] >= w[0] - SWEEP_TOLERANCE);
    let curve: Vec<String> = SWEEP_COUNTS
        .iter()
        .zip(&f1)
        .map(|(c, f)| format!("{c}:{f:.3}"))
        .collect();
    r.line(
        "outlier-count sweep",
        f1.len() == SWEEP_COUNTS.len() && monotone,
        format!(
            "unknown F1 by synthetic count {} (non-decreasing within {SWEEP_TOLERANCE}); CSV at {}",
            curve.join(" "),
            csv_path.display()
        ),
    );
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).expect("readable file");
                out.insert(
                    path.strip_prefix(dir).expect("under dir").to_path_buf(),
                    bytes,
                );
            }
        }
    }
    out
}

fn determinism(r: &mut Report, bench_dir: &Path, work: &Path) {
    let cfg = bench_dir.join("config.json");
    let data = bench_dir.join("blobs.jsonl");
    let split = work.join("split");
    let ckpt = work.join("ours/seed-1/model.oosm");
    let (ours, msp, emb, csv) = (
        work.join("ours"),
        work.join("msp"),
        work.join("emb/test.oose"),
        work.join("sweep.csv"),
    );
    let commands: Vec<Vec<&str>> = vec![
        vec![
            "split",
            "--data",
            p(&data),
            "--known-ratio",
            "0.6666666666666666",
            "--seed",
            "5",
            "--out",
            p(&split),
        ],
        vec![
            "train",
            "--config",
            p(&cfg),
            "--split",
            p(&split),
            "--seeds",
            "1..3",
            "--max-epochs",
            "20",
            "--out",
            p(&ours),
        ],
        vec![
            "train",
            "--config",
            p(&cfg),
            "--split",
            p(&split),
            "--method",
            "msp",
            "--seed",
            "1",
            "--max-epochs",
            "20",
            "--out",
            p(&msp),
        ],
        vec![
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--split",
            p(&split),
            "--confusion",
        ],
        vec![
            "export-embeddings",
            "--checkpoint",
            p(&ckpt),
            "--split",
            p(&split),
            "--out",
            p(&emb),
        ],
        vec![
            "sweep",
            "--config",
            p(&cfg),
            "--split",
            p(&split),
            "--seeds",
            "1..2",
            "--max-epochs",
            "10",
            "--synthetic",
            "0,50",
            "--out",
            p(&csv),
        ],
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let stdout: Vec<Vec<u8>> = commands.iter().map(|c| run_cli(c).stdout).collect();
        runs.push((stdout, snapshot(work)));
    }
    let artifacts = runs[0].1.len();
    r.line(
        "determinism",
        runs[0] == runs[1],
        format!("split, train (3 seeds), msp, eval, export and sweep rerun with identical flags: {artifacts} artifacts and all stdout byte-identical"),
    );
}

fn round_trips(r: &mut Report) {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut g = rng::stream(11, 0);
    let ls = LabelSpace::new(vec!["a".into(), "b".into(), "c".into()]).expect("distinct");
    let arch = oos_core::classifier::Architecture {
        input_dim: 16,
        hidden: vec![32, 8],
        num_outputs: 4,
        temperature: 0.1,
    };
    let mut model = oos_core::classifier::MlpClassifier::new(arch, 11).expect("valid");
    for layer in model.layers_mut() {
        layer
            .bias
            .iter_mut()
            .for_each(|b| *b = g.random_range(-1.0..1.0));
    }
    let encoder = Encoder::build(&EncoderSpec::hashed_mean(16, 1024, true), 11).expect("valid");
    let ckpt = Checkpoint::ours(&model, &ls, &encoder, 11);
    let path = dir.path().join("m.oosm");
    ckpt.save(&path).expect("saved");
    let back = Checkpoint::load(&path).expect("loaded");
    let bits = |c: &Checkpoint| -> Vec<u64> {
        c.model
            .params()
            .into_iter()
            .flatten()
            .chain(c.encoder_table.iter().flatten())
            .map(|v| v.to_bits())
            .collect()
    };
    let ckpt_ok = back == ckpt && bits(&back) == bits(&ckpt) && back.to_bytes() == ckpt.to_bytes();

    let values: Vec<f32> = (0..100 * 16)
        .map(|_| g.random_range(-10.0f32..10.0))
        .collect();
    let matrix = EmbeddingMatrix { dim: 16, values };
    let rows: Vec<RowEntry> = (0..100)
        .map(|i| RowEntry {
            row: i,
            id: format!("u{i}"),
            label: Some(format!("c{}", i % 3)),
        })
        .collect();
    let emb = dir.path().join("e.oose");
    oose::write(&emb, &matrix, &rows).expect("written");
    let (m2, r2) = oose::read(&emb).expect("read");
    let as_bits = |m: &EmbeddingMatrix| m.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let oose_ok = m2.dim == 16 && as_bits(&m2) == as_bits(&matrix) && r2 == rows;
    r.line(
        "round-trips",
        ckpt_ok && oose_ok,
        format!(
            "checkpoint ({} f64 values) and OOSE ({} f32 values) reload bit-exactly",
            bits(&ckpt).len(),
            matrix.values.len()
        ),
    );
}

fn main() {
    // Directional timings are for one core; keep the sweep and CLI reruns
    // single-threaded too so results do not depend on the host.
    std::env::set_var("OOS_THREADS", "1");
    let mut r = Report { failures: 0 };
    let work = tempfile::tempdir().expect("tempdir");
    let bench_dir = work.path().join("bench");
    run_cli(&["blobs", "--out", p(&bench_dir)]);
    let b = Bench::new();

    gradient_oracle(&mut r);
    convexity(&mut r);
    metric_oracle(&mut r);
    batch_contract(&mut r, &b.dataset, &b.pool);
    feasibility(&mut r);
    let ours = directional(&mut r, &b);
    ablation(&mut r, &b, &ours);
    sweep(&mut r, &bench_dir, Path::new(env!("CARGO_TARGET_TMPDIR")));
    determinism(&mut r, &bench_dir, &work.path().join("det"));
    round_trips(&mut r);

    println!("{} criteria failed", r.failures);
    if r.failures > 0 {
        std::process::exit(1);
    }
}
