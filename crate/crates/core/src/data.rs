//! Datasets: loading, deterministic splitting, n-shot sampling and a
//! synthetic bag-of-words corpus generator.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Class names used when a config does not supply its own.
pub const DEFAULT_CLASS_NAMES: [&str; 3] = ["positive", "negative", "neutral"];

/// Class counts of the LDC sentiment corpus (positive, negative, neutral).
pub const LDC_CLASS_COUNTS: [usize; 3] = [5658, 2578, 10106];

pub fn default_class_names() -> Vec<String> {
    DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// LDC class counts normalized to priors.
pub fn ldc_priors() -> Vec<f64> {
    let total: usize = LDC_CLASS_COUNTS.iter().sum();
    LDC_CLASS_COUNTS
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect()
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),
    #[error("instance {0:?} has empty text")]
    EmptyText(String),
    #[error("instance {id:?} has label {label} but only {num_classes} classes exist")]
    LabelOutOfRange {
        id: String,
        label: usize,
        num_classes: usize,
    },
    #[error("class names must be distinct and non-empty")]
    InvalidClassNames,
    #[error("instance {0:?} has no gold label")]
    MissingGoldLabel(String),
    #[error("test fraction {0} is outside (0, 1)")]
    InvalidFraction(f64),
    #[error("dataset of {size} instances is too small to split with fraction {fraction}")]
    TooSmall { size: usize, fraction: f64 },
    #[error("n-shot size must be positive")]
    ZeroShot,
    #[error("class {class:?} has {available} labeled instances, {needed} needed")]
    InsufficientClassCount {
        class: String,
        available: usize,
        needed: usize,
    },
    #[error("empty vocabulary for class {0}")]
    EmptyVocabulary(usize),
    #[error("invalid synthetic corpus parameter: {0}")]
    InvalidSynthParam(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub text: String,
    pub gold_label: Option<usize>,
}

impl Instance {
    pub fn new(id: impl Into<String>, text: impl Into<String>, gold_label: Option<usize>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            gold_label,
        }
    }
}

/// An ordered collection of instances with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    instances: Vec<Instance>,
    class_names: Vec<String>,
    provenance: String,
}

impl Dataset {
    pub fn new(
        instances: Vec<Instance>,
        class_names: Vec<String>,
        provenance: impl Into<String>,
    ) -> Result<Self, DataError> {
        validate_class_names(&class_names)?;
        let mut seen = HashSet::with_capacity(instances.len());
        for inst in &instances {
            if !seen.insert(inst.id.as_str()) {
                return Err(DataError::DuplicateId(inst.id.clone()));
            }
            if inst.text.trim().is_empty() {
                return Err(DataError::EmptyText(inst.id.clone()));
            }
            if let Some(label) = inst.gold_label {
                if label >= class_names.len() {
                    return Err(DataError::LabelOutOfRange {
                        id: inst.id.clone(),
                        label,
                        num_classes: class_names.len(),
                    });
                }
            }
        }
        Ok(Self {
            instances,
            class_names,
            provenance: provenance.into(),
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.instances.iter().map(|i| i.id.as_str())
    }

    /// Number of gold-labeled instances per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for label in self.instances.iter().filter_map(|i| i.gold_label) {
            counts[label] += 1;
        }
        counts
    }

    pub fn gold_labels(&self) -> Result<Vec<usize>, DataError> {
        self.instances
            .iter()
            .map(|i| {
                i.gold_label
                    .ok_or_else(|| DataError::MissingGoldLabel(i.id.clone()))
            })
            .collect()
    }

    fn subset(&self, picked: impl IntoIterator<Item = usize>, provenance: String) -> Dataset {
        Dataset {
            instances: picked
                .into_iter()
                .map(|i| self.instances[i].clone())
                .collect(),
            class_names: self.class_names.clone(),
            provenance,
        }
    }

    /// Serialize as JSONL records in the load format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for inst in &self.instances {
            let record = JsonRecord {
                id: Some(inst.id.clone()),
                text: inst.text.clone(),
                label: inst.gold_label.map(|l| self.class_names[l].clone()),
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

fn validate_class_names(names: &[String]) -> Result<(), DataError> {
    let distinct: HashSet<&str> = names.iter().map(String::as_str).collect();
    if names.is_empty() || distinct.len() != names.len() || names.iter().any(|n| n.is_empty()) {
        return Err(DataError::InvalidClassNames);
    }
    Ok(())
}

/// Gold labels of pool instances. Only metrics code should read these.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShadowLabels(BTreeMap<String, usize>);

impl ShadowLabels {
    pub fn get(&self, id: &str) -> Option<usize> {
        self.0.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.0.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Unlabeled text as seen by strategies and classifiers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolInstance {
    pub id: String,
    pub text: String,
}

/// The unlabeled pool. Gold labels carried over from the source dataset are
/// kept apart in [`ShadowLabels`] so training code never sees them.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledPool {
    instances: Vec<PoolInstance>,
    class_names: Vec<String>,
    shadow: ShadowLabels,
}

impl UnlabeledPool {
    /// Build a pool from a dataset, moving any gold labels into the shadow map.
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let mut shadow = BTreeMap::new();
        let instances = dataset
            .instances()
            .iter()
            .map(|inst| {
                if let Some(label) = inst.gold_label {
                    shadow.insert(inst.id.clone(), label);
                }
                PoolInstance {
                    id: inst.id.clone(),
                    text: inst.text.clone(),
                }
            })
            .collect();
        Self {
            instances,
            class_names: dataset.class_names().to_vec(),
            shadow: ShadowLabels(shadow),
        }
    }

    pub fn instances(&self) -> &[PoolInstance] {
        &self.instances
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn shadow(&self) -> &ShadowLabels {
        &self.shadow
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PoolInstance> {
        self.instances.iter().find(|i| i.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl DataFormat {
    /// Guess from the file extension; anything other than `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Jsonl,
        }
    }
}

impl FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(DataFormat::Jsonl),
            "csv" => Ok(DataFormat::Csv),
            other => Err(format!("unknown data format {other:?}")),
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::Jsonl => "jsonl",
            DataFormat::Csv => "csv",
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

/// Load a dataset, preserving file order. Labels map to class indices by
/// exact (case-sensitive) match against `class_names`.
pub fn load_dataset(
    path: &Path,
    format: DataFormat,
    class_names: &[String],
) -> Result<Dataset, DataError> {
    validate_class_names(class_names)?;
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let records = match format {
        DataFormat::Jsonl => read_jsonl(BufReader::new(file)).map_err(|e| match e {
            ReadError::Io(source) => io_err(source),
            ReadError::Data(d) => d,
        })?,
        DataFormat::Csv => read_csv(file)?,
    };

    let mut instances = Vec::with_capacity(records.len());
    let mut seen = HashSet::new();
    for (k, (line, record)) in records.into_iter().enumerate() {
        let id = record.id.unwrap_or_else(|| format!("row-{k}"));
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateId(id));
        }
        if record.text.trim().is_empty() {
            return Err(DataError::Malformed {
                line,
                reason: "empty text".into(),
            });
        }
        let gold_label = match record.label {
            None => None,
            Some(label) => Some(
                class_names
                    .iter()
                    .position(|c| *c == label)
                    .ok_or(DataError::UnknownLabel { line, label })?,
            ),
        };
        instances.push(Instance {
            id,
            text: record.text,
            gold_label,
        });
    }
    Dataset::new(instances, class_names.to_vec(), path.display().to_string())
}

enum ReadError {
    Io(std::io::Error),
    Data(DataError),
}

fn read_jsonl(reader: impl BufRead) -> Result<Vec<(usize, JsonRecord)>, ReadError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(ReadError::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonRecord = serde_json::from_str(&line).map_err(|e| {
            ReadError::Data(DataError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })
        })?;
        out.push((i + 1, record));
    }
    Ok(out)
}

fn read_csv(reader: impl std::io::Read) -> Result<Vec<(usize, JsonRecord)>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Malformed {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let text_col = column("text").ok_or(DataError::Malformed {
        line: 1,
        reason: "header has no `text` column".into(),
    })?;
    let id_col = column("id");
    let label_col = column("label");

    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        // Header is line 1; records start at line 2 (multi-line quoted
        // fields shift this, so prefer the reader's own position).
        let fallback_line = i + 2;
        let row = row.map_err(|e| DataError::Malformed {
            line: e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(fallback_line),
            reason: e.to_string(),
        })?;
        let line = row
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(fallback_line);
        let cell = |col: Option<usize>| {
            col.and_then(|c| row.get(c))
                .filter(|v| !v.is_empty())
                .map(str::to_string)
        };
        let text = cell(Some(text_col)).unwrap_or_default();
        out.push((
            line,
            JsonRecord {
                id: cell(id_col),
                text,
                label: cell(label_col),
            },
        ));
    }
    Ok(out)
}

/// Train/test split parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(test_fraction: f64, seed: u64) -> Result<Self, DataError> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(DataError::InvalidFraction(test_fraction));
        }
        Ok(Self {
            test_fraction,
            seed,
        })
    }

    /// round-half-up(test_fraction * n)
    pub fn test_size(&self, n: usize) -> usize {
        (self.test_fraction * n as f64 + 0.5).floor() as usize
    }
}

/// Randomly partition a fully labeled dataset. Each side keeps the input order.
pub fn split_train_test(
    dataset: &Dataset,
    spec: &SplitSpec,
) -> Result<(Dataset, Dataset), DataError> {
    SplitSpec::new(spec.test_fraction, spec.seed)?;
    dataset.gold_labels()?;
    let n = dataset.len();
    let test_size = spec.test_size(n);
    if test_size == 0 || test_size >= n {
        return Err(DataError::TooSmall {
            size: n,
            fraction: spec.test_fraction,
        });
    }
    let mut rng = seed::rng(spec.seed);
    let mut in_test = vec![false; n];
    for i in index::sample(&mut rng, n, test_size) {
        in_test[i] = true;
    }
    let (test_idx, train_idx): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| in_test[i]);
    let prov = dataset.provenance();
    Ok((
        dataset.subset(train_idx, format!("{prov} [train seed={}]", spec.seed)),
        dataset.subset(test_idx, format!("{prov} [test seed={}]", spec.seed)),
    ))
}

/// Draw exactly `n` gold-labeled instances per class (uniform, without
/// replacement); everything else forms the unlabeled pool.
pub fn sample_n_shot(
    train: &Dataset,
    n: usize,
    seed: u64,
) -> Result<(Dataset, UnlabeledPool), DataError> {
    if n == 0 {
        return Err(DataError::ZeroShot);
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); train.num_classes()];
    for (i, inst) in train.instances().iter().enumerate() {
        if let Some(label) = inst.gold_label {
            by_class[label].push(i);
        }
    }
    let mut rng = seed::rng(seed);
    let mut picked = vec![false; train.len()];
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < n {
            return Err(DataError::InsufficientClassCount {
                class: train.class_names()[class].clone(),
                available: members.len(),
                needed: n,
            });
        }
        for j in index::sample(&mut rng, members.len(), n) {
            picked[members[j]] = true;
        }
    }
    let (labeled_idx, pool_idx): (Vec<usize>, Vec<usize>) =
        (0..train.len()).partition(|&i| picked[i]);
    let prov = train.provenance();
    let labeled = train.subset(labeled_idx, format!("{prov} [{n}-shot seed={seed}]"));
    let rest = train.subset(pool_idx, format!("{prov} [pool seed={seed}]"));
    Ok((labeled, UnlabeledPool::from_dataset(&rest)))
}

/// Deterministic pseudo-word vocabularies, `words_per_class` per class,
/// disjoint across classes (`c<class>w<k>`).
pub fn synthetic_vocabulary(num_classes: usize, words_per_class: usize) -> Vec<Vec<String>> {
    (0..num_classes)
        .map(|c| (0..words_per_class).map(|k| format!("c{c}w{k}")).collect())
        .collect()
}

/// Generator for bag-of-words corpora with known class structure.
///
/// Each text is 5-15 tokens. A token comes from the instance's own class
/// vocabulary, except with probability `noise` it is taken from a uniformly
/// chosen other class. Within a vocabulary, word `k` has weight
/// `1 / (k + 1)^zipf_exponent` (0 gives a uniform draw).
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub vocab: Vec<Vec<String>>,
    pub class_names: Vec<String>,
    pub noise: f64,
    pub zipf_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl SyntheticCorpus {
    pub fn new(vocab: Vec<Vec<String>>, noise: f64) -> Self {
        let class_names = if vocab.len() == DEFAULT_CLASS_NAMES.len() {
            default_class_names()
        } else {
            (0..vocab.len()).map(|c| format!("class{c}")).collect()
        };
        Self {
            vocab,
            class_names,
            noise,
            zipf_exponent: 0.0,
            min_len: 5,
            max_len: 15,
        }
    }

    pub fn with_zipf(mut self, exponent: f64) -> Self {
        self.zipf_exponent = exponent;
        self
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Self {
        self.class_names = names;
        self
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.vocab.is_empty() {
            return Err(DataError::InvalidSynthParam("no classes".into()));
        }
        if let Some(c) = self.vocab.iter().position(Vec::is_empty) {
            return Err(DataError::EmptyVocabulary(c));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(DataError::InvalidSynthParam(format!(
                "noise {} outside [0, 1)",
                self.noise
            )));
        }
        if self.noise > 0.0 && self.vocab.len() < 2 {
            return Err(DataError::InvalidSynthParam(
                "noise needs at least two classes".into(),
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(DataError::InvalidSynthParam("bad text length range".into()));
        }
        if self.class_names.len() != self.vocab.len() {
            return Err(DataError::InvalidClassNames);
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(DataError::InvalidSynthParam("bad zipf exponent".into()));
        }
        Ok(())
    }

    /// Generate `counts[c]` instances of class `c`, shuffled, with ids
    /// `syn-000000`, `syn-000001`, ... in output order.
    pub fn generate(&self, counts: &[usize], seed: u64) -> Result<Dataset, DataError> {
        self.validate()?;
        if counts.len() != self.vocab.len() {
            return Err(DataError::InvalidSynthParam(
                "one count per class required".into(),
            ));
        }
        let cumulative: Vec<Vec<f64>> = self
            .vocab
            .iter()
            .map(|words| {
                let mut acc = 0.0;
                (0..words.len())
                    .map(|k| {
                        acc += 1.0 / ((k + 1) as f64).powf(self.zipf_exponent);
                        acc
                    })
                    .collect()
            })
            .collect();

        let mut rng = seed::rng(seed);
        let mut labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
            .collect();
        rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);

        let num_classes = self.vocab.len();
        let mut instances = Vec::with_capacity(labels.len());
        for (i, &class) in labels.iter().enumerate() {
            let len = rng.gen_range(self.min_len..=self.max_len);
            let mut words = Vec::with_capacity(len);
            for _ in 0..len {
                let source = if self.noise > 0.0 && rng.gen::<f64>() < self.noise {
                    let other = rng.gen_range(0..num_classes - 1);
                    if other >= class {
                        other + 1
                    } else {
                        other
                    }
                } else {
                    class
                };
                let cdf = &cumulative[source];
                let u = rng.gen::<f64>() * cdf[cdf.len() - 1];
                let k = cdf.partition_point(|&x| x <= u).min(cdf.len() - 1);
                words.push(self.vocab[source][k].as_str());
            }
            instances.push(Instance {
                id: format!("syn-{i:06}"),
                text: words.join(" "),
                gold_label: Some(class),
            });
        }
        Dataset::new(
            instances,
            self.class_names.clone(),
            format!("synthetic(seed={seed}, noise={})", self.noise),
        )
    }

    /// Generate `total` instances split across classes by `priors`
    /// (largest-remainder rounding).
    pub fn generate_with_priors(
        &self,
        total: usize,
        priors: &[f64],
        seed: u64,
    ) -> Result<Dataset, DataError> {
        let counts = apportion(total, priors)?;
        self.generate(&counts, seed)
    }
}

/// Split `total` into integer counts proportional to `weights`.
pub fn apportion(total: usize, weights: &[f64]) -> Result<Vec<usize>, DataError> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) || !(sum > 0.0) {
        return Err(DataError::InvalidSynthParam("bad class priors".into()));
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut remaining = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[c] += 1;
        remaining -= 1;
    }
    Ok(counts)
}

/// Balanced synthetic corpus: `n_per_class` instances for every class.
pub fn synth_generate(
    n_per_class: usize,
    vocab_per_class: &[Vec<String>],
    noise: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    let corpus = SyntheticCorpus::new(vocab_per_class.to_vec(), noise);
    corpus.generate(&vec![n_per_class; vocab_per_class.len()], seed)
}
