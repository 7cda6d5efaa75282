//! Labeled utterance datasets, open-domain sentence pools and the
//! known/unknown class-holdout split.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng;

/// Label name written for the out-of-scope class.
pub const OOS_LABEL: &str = "__oos__";

#[derive(Debug, Clone, PartialEq)]
pub enum Content {
    Text(String),
    Numeric(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub content: Content,
}

impl Utterance {
    pub fn text(id: impl Into<String>, text: impl Into<String>) -> Self {
        Utterance {
            id: id.into(),
            content: Content::Text(text.into()),
        }
    }

    pub fn numeric(id: impl Into<String>, values: Vec<f64>) -> Self {
        Utterance {
            id: id.into(),
            content: Content::Numeric(values),
        }
    }

    fn record(&self) -> serde_json::Map<String, Value> {
        let mut map = serde_json::Map::new();
        map.insert("id".into(), Value::String(self.id.clone()));
        match &self.content {
            Content::Text(t) => {
                map.insert("text".into(), Value::String(t.clone()));
            }
            Content::Numeric(v) => {
                map.insert(
                    "vec".into(),
                    serde_json::to_value(v).expect("finite floats"),
                );
            }
        }
        map
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<(Utterance, String)>,
    pub class_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset, deriving class names in first-appearance order.
    pub fn from_examples(examples: Vec<(Utterance, String)>) -> Result<Self> {
        let mut class_names: Vec<String> = Vec::new();
        let mut seen_classes = HashSet::new();
        let mut seen_ids = HashSet::new();
        for (utt, label) in &examples {
            if !seen_ids.insert(utt.id.as_str()) {
                return Err(Error::InvalidData(format!("duplicate id {:?}", utt.id)));
            }
            if seen_classes.insert(label.as_str()) {
                class_names.push(label.clone());
            }
        }
        Ok(Dataset {
            examples,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn utterances(&self) -> Vec<Utterance> {
        self.examples.iter().map(|(u, _)| u.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl DataFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Jsonl,
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<Value>,
    text: Option<String>,
    vec: Option<Vec<f64>>,
    label: Option<Value>,
}

fn scalar_to_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Parses one jsonl line into an utterance and an optional label.
fn parse_record(path: &Path, line_no: usize, line: &str) -> Result<(Utterance, Option<String>)> {
    let raw: RawRecord =
        serde_json::from_str(line).map_err(|e| parse_err(path, line_no, e.to_string()))?;
    let id = match &raw.id {
        Some(v) => scalar_to_string(v)
            .ok_or_else(|| parse_err(path, line_no, "`id` must be a string or number"))?,
        None => format!("line-{line_no}"),
    };
    let content = match (raw.text, raw.vec) {
        (Some(t), None) => Content::Text(t),
        (None, Some(v)) => {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(parse_err(path, line_no, "`vec` has non-finite entries"));
            }
            Content::Numeric(v)
        }
        (Some(_), Some(_)) => {
            return Err(parse_err(path, line_no, "record has both `text` and `vec`"))
        }
        (None, None) => {
            return Err(parse_err(
                path,
                line_no,
                "record has neither `text` nor `vec`",
            ))
        }
    };
    let label = match &raw.label {
        Some(v) => Some(
            scalar_to_string(v)
                .ok_or_else(|| parse_err(path, line_no, "`label` must be a string or number"))?,
        ),
        None => None,
    };
    Ok((Utterance { id, content }, label))
}

/// Checks that every example is the same kind and numeric ones share a dimension.
fn check_homogeneous(path: &Path, rows: &[(usize, &Utterance)]) -> Result<()> {
    let mut first: Option<(usize, &Content)> = None;
    for &(line, utt) in rows {
        match first {
            None => first = Some((line, &utt.content)),
            Some((_, prev)) => match (prev, &utt.content) {
                (Content::Text(_), Content::Text(_)) => {}
                (Content::Numeric(a), Content::Numeric(b)) => {
                    if a.len() != b.len() {
                        return Err(parse_err(
                            path,
                            line,
                            format!("vector dimension {} differs from {}", b.len(), a.len()),
                        ));
                    }
                }
                _ => return Err(parse_err(path, line, "mixed text and numeric records")),
            },
        }
    }
    Ok(())
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    let mut rows: Vec<(usize, Utterance, String)> = Vec::new();
    match format {
        DataFormat::Jsonl => {
            for (i, line) in open(path)?.lines().enumerate() {
                let line_no = i + 1;
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let (utt, label) = parse_record(path, line_no, &line)?;
                let label = label.ok_or_else(|| parse_err(path, line_no, "missing `label`"))?;
                rows.push((line_no, utt, label));
            }
        }
        DataFormat::Csv => {
            let mut reader = csv::Reader::from_reader(open(path)?);
            let headers = reader
                .headers()
                .map_err(|e| parse_err(path, 1, e.to_string()))?
                .clone();
            let col = |name: &str| headers.iter().position(|h| h.trim() == name);
            let (id_col, text_col, label_col) = (col("id"), col("text"), col("label"));
            let (Some(text_col), Some(label_col)) = (text_col, label_col) else {
                return Err(parse_err(
                    path,
                    1,
                    "csv header must contain `text` and `label`",
                ));
            };
            for record in reader.records() {
                let record = record.map_err(|e| {
                    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                    parse_err(path, line, e.to_string())
                })?;
                let line_no = record.position().map(|p| p.line() as usize).unwrap_or(0);
                let field = |c: usize| record.get(c).map(str::to_string);
                let text =
                    field(text_col).ok_or_else(|| parse_err(path, line_no, "missing `text`"))?;
                let label = field(label_col)
                    .filter(|l| !l.is_empty())
                    .ok_or_else(|| parse_err(path, line_no, "missing `label`"))?;
                let id = id_col
                    .and_then(field)
                    .filter(|s| !s.is_empty())
                    .unwrap_or_else(|| format!("line-{line_no}"));
                rows.push((line_no, Utterance::text(id, text), label));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidData(format!(
            "{}: empty dataset",
            path.display()
        )));
    }
    let refs: Vec<(usize, &Utterance)> = rows.iter().map(|(l, u, _)| (*l, u)).collect();
    check_homogeneous(path, &refs)?;
    let mut ids = HashSet::new();
    for (line, utt, _) in &rows {
        if !ids.insert(utt.id.clone()) {
            return Err(parse_err(path, *line, format!("duplicate id {:?}", utt.id)));
        }
    }
    Dataset::from_examples(rows.into_iter().map(|(_, u, l)| (u, l)).collect())
}

/// Loads an unlabeled open-domain pool.
///
/// `.jsonl` files are read as records with `text` or `vec`; anything else is
/// plain text with one sentence per line. Blank lines are skipped and exact
/// duplicates dropped. Plain-text ids are `open-<line>`.
pub fn load_open_pool(path: &Path) -> Result<Vec<Utterance>> {
    let jsonl = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("jsonl"));
    let mut pool = Vec::new();
    let mut seen_text: HashSet<String> = HashSet::new();
    let mut seen_vec: HashSet<Vec<u64>> = HashSet::new();
    let mut lines_of: Vec<usize> = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let utt = if jsonl {
            let (mut utt, _) = parse_record(path, line_no, &line)?;
            if utt.id == format!("line-{line_no}") {
                utt.id = format!("open-{line_no}");
            }
            utt
        } else {
            Utterance::text(format!("open-{line_no}"), line.trim())
        };
        let fresh = match &utt.content {
            Content::Text(t) => seen_text.insert(t.clone()),
            Content::Numeric(v) => seen_vec.insert(v.iter().map(|x| x.to_bits()).collect()),
        };
        if fresh {
            lines_of.push(line_no);
            pool.push(utt);
        }
    }
    if pool.is_empty() {
        return Err(Error::InvalidData(format!(
            "{}: empty open pool",
            path.display()
        )));
    }
    let refs: Vec<(usize, &Utterance)> = lines_of.iter().copied().zip(pool.iter()).collect();
    check_homogeneous(path, &refs)?;
    Ok(pool)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub known_ratio: f64,
    pub seed: u64,
    /// Fraction of each known class reserved for the test split.
    pub test_fraction: f64,
}

impl SplitSpec {
    pub fn new(known_ratio: f64, seed: u64) -> Self {
        SplitSpec {
            known_ratio,
            seed,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub known_classes: Vec<String>,
    pub oos_index: usize,
}

impl LabelSpace {
    pub fn new(known_classes: Vec<String>) -> Result<Self> {
        if known_classes.len() < 2 {
            return Err(Error::InvalidData(format!(
                "label space needs at least 2 known classes, got {}",
                known_classes.len()
            )));
        }
        let unique: HashSet<&String> = known_classes.iter().collect();
        if unique.len() != known_classes.len() {
            return Err(Error::InvalidData(
                "duplicate class names in label space".into(),
            ));
        }
        let oos_index = known_classes.len();
        Ok(LabelSpace {
            known_classes,
            oos_index,
        })
    }

    /// Number of known classes, K.
    pub fn num_known(&self) -> usize {
        self.known_classes.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.known_classes.iter().position(|c| c == name)
    }

    pub fn name_of(&self, index: usize) -> &str {
        self.known_classes
            .get(index)
            .map(String::as_str)
            .unwrap_or(OOS_LABEL)
    }

    /// Maps every example of a known-class dataset to its label index.
    pub fn indices_for(&self, dataset: &Dataset) -> Result<Vec<usize>> {
        dataset
            .examples
            .iter()
            .map(|(u, l)| {
                self.index_of(l).ok_or_else(|| {
                    Error::Mismatch(format!("example {:?} has unknown class {l:?}", u.id))
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: LabelSpace = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let checked = LabelSpace::new(parsed.known_classes)?;
        if checked.oos_index != parsed.oos_index {
            return Err(Error::Format(format!(
                "{}: oos_index {} != number of known classes",
                path.display(),
                parsed.oos_index
            )));
        }
        Ok(checked)
    }
}

/// A test example: the utterance, its original class name and its target in `[0, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestExample {
    pub utterance: Utterance,
    pub source_label: String,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Vec<TestExample>,
    pub label_space: LabelSpace,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Number of known classes for a ratio: round-half-up, at least 2 and
/// leaving at least one class held out.
pub fn known_class_count(num_classes: usize, known_ratio: f64) -> usize {
    round_half_up(known_ratio * num_classes as f64)
        .max(2)
        .min(num_classes.saturating_sub(1))
}

pub fn split_known_unknown(
    dataset: &Dataset,
    spec: &SplitSpec,
    val_fraction: f64,
) -> Result<SplitResult> {
    if !(spec.known_ratio > 0.0 && spec.known_ratio < 1.0) {
        return Err(Error::Config(format!(
            "known ratio must lie in (0, 1), got {}",
            spec.known_ratio
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 0.5) {
        return Err(Error::Config(format!(
            "validation fraction must lie in (0, 0.5), got {val_fraction}"
        )));
    }
    if !(spec.test_fraction > 0.0 && spec.test_fraction + val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction {} leaves no training data",
            spec.test_fraction
        )));
    }
    let num_classes = dataset.class_names.len();
    if num_classes < 3 {
        return Err(Error::InvalidData(format!(
            "class holdout needs at least 3 classes (2 known + 1 held out), dataset has {num_classes}"
        )));
    }
    let k = known_class_count(num_classes, spec.known_ratio);

    let mut shuffled: Vec<usize> = (0..num_classes).collect();
    shuffled.shuffle(&mut rng::stream(spec.seed, rng::STREAM_CLASS_SPLIT));
    let mut is_known = vec![false; num_classes];
    for &c in &shuffled[..k] {
        is_known[c] = true;
    }
    // Known classes keep dataset order so label indices are stable to read.
    let known_classes: Vec<String> = dataset
        .class_names
        .iter()
        .zip(&is_known)
        .filter(|(_, &known)| known)
        .map(|(n, _)| n.clone())
        .collect();
    let label_space = LabelSpace::new(known_classes)?;

    let class_index: HashMap<&str, usize> = dataset
        .class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, (_, label)) in dataset.examples.iter().enumerate() {
        members[class_index[label.as_str()]].push(i);
    }

    #[derive(Clone, Copy, PartialEq)]
    enum Part {
        Train,
        Validation,
        Test,
    }
    let mut part = vec![Part::Test; dataset.len()];
    let mut example_rng = rng::stream(spec.seed, rng::STREAM_EXAMPLE_SPLIT);
    for (c, idx) in members.iter().enumerate() {
        if !is_known[c] {
            continue;
        }
        let n = idx.len();
        if n < 3 {
            return Err(Error::InvalidData(format!(
                "known class {:?} has {n} examples; at least 3 are needed for train/validation/test",
                dataset.class_names[c]
            )));
        }
        let n_test = round_half_up(n as f64 * spec.test_fraction).max(1);
        let n_val = round_half_up(n as f64 * val_fraction).max(1);
        if n_test + n_val >= n {
            return Err(Error::InvalidData(format!(
                "known class {:?} has too few examples ({n}) for the requested fractions",
                dataset.class_names[c]
            )));
        }
        let mut order = idx.clone();
        order.shuffle(&mut example_rng);
        for (rank, &i) in order.iter().enumerate() {
            part[i] = if rank < n_test {
                Part::Test
            } else if rank < n_test + n_val {
                Part::Validation
            } else {
                Part::Train
            };
        }
    }

    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for (i, (utt, label)) in dataset.examples.iter().enumerate() {
        match label_space.index_of(label) {
            Some(target) => match part[i] {
                Part::Train => train.push((utt.clone(), label.clone())),
                Part::Validation => validation.push((utt.clone(), label.clone())),
                Part::Test => test.push(TestExample {
                    utterance: utt.clone(),
                    source_label: label.clone(),
                    target,
                }),
            },
            None => test.push(TestExample {
                utterance: utt.clone(),
                source_label: label.clone(),
                target: label_space.oos_index,
            }),
        }
    }
    let with_known_classes = |examples| Dataset {
        examples,
        class_names: label_space.known_classes.clone(),
    };
    Ok(SplitResult {
        train: with_known_classes(train),
        validation: with_known_classes(validation),
        test,
        label_space,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn write_dataset_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    for (utt, label) in &dataset.examples {
        let mut rec = utt.record();
        rec.insert("label".into(), Value::String(label.clone()));
        writeln!(out, "{}", Value::Object(rec)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes an unlabeled pool as jsonl records readable by [`load_open_pool`].
pub fn write_pool_jsonl(pool: &[Utterance], path: &Path) -> Result<()> {
    let mut out = create(path)?;
    for utt in pool {
        writeln!(out, "{}", Value::Object(utt.record())).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes test examples; `label` holds the original class and `target` the index in `[0, K]`.
pub fn write_test_jsonl(test: &[TestExample], path: &Path) -> Result<()> {
    let mut out = create(path)?;
    for ex in test {
        let mut rec = ex.utterance.record();
        rec.insert("label".into(), Value::String(ex.source_label.clone()));
        rec.insert("target".into(), Value::from(ex.target));
        writeln!(out, "{}", Value::Object(rec)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_test_jsonl(path: &Path) -> Result<Vec<TestExample>> {
    let mut test = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (utterance, label) = parse_record(path, line_no, &line)?;
        let value: Value =
            serde_json::from_str(&line).map_err(|e| parse_err(path, line_no, e.to_string()))?;
        let target = value
            .get("target")
            .and_then(Value::as_u64)
            .ok_or_else(|| parse_err(path, line_no, "missing integer `target`"))?;
        test.push(TestExample {
            utterance,
            source_label: label.unwrap_or_default(),
            target: target as usize,
        });
    }
    if test.is_empty() {
        return Err(Error::InvalidData(format!(
            "{}: empty test split",
            path.display()
        )));
    }
    Ok(test)
}

/// File layout of a split written to a directory.
#[derive(Debug, Clone)]
pub struct SplitPaths {
    pub train: PathBuf,
    pub validation: PathBuf,
    pub test: PathBuf,
    pub label_space: PathBuf,
}

impl SplitPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SplitPaths {
            train: dir.join("train.jsonl"),
            validation: dir.join("validation.jsonl"),
            test: dir.join("test.jsonl"),
            label_space: dir.join("label_space.json"),
        }
    }
}

impl SplitResult {
    pub fn write(&self, dir: &Path) -> Result<SplitPaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = SplitPaths::in_dir(dir);
        write_dataset_jsonl(&self.train, &paths.train)?;
        write_dataset_jsonl(&self.validation, &paths.validation)?;
        write_test_jsonl(&self.test, &paths.test)?;
        self.label_space.save(&paths.label_space)?;
        Ok(paths)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let paths = SplitPaths::in_dir(dir);
        let label_space = LabelSpace::load(&paths.label_space)?;
        let mut train = load_dataset(&paths.train, DataFormat::Jsonl)?;
        let mut validation = load_dataset(&paths.validation, DataFormat::Jsonl)?;
        label_space.indices_for(&train)?;
        label_space.indices_for(&validation)?;
        train.class_names = label_space.known_classes.clone();
        validation.class_names = label_space.known_classes.clone();
        let test = load_test_jsonl(&paths.test)?;
        if let Some(bad) = test.iter().find(|t| t.target > label_space.oos_index) {
            return Err(Error::Mismatch(format!(
                "test example {:?} has target {} but K = {}",
                bad.utterance.id,
                bad.target,
                label_space.num_known()
            )));
        }
        Ok(SplitResult {
            train,
            validation,
            test,
            label_space,
        })
    }
}
