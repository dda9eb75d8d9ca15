//! Declarative experiment configuration and single-run drivers.
//!
//! A config file is TOML. Every table rejects unknown keys and every field
//! has a default, so a minimal file only names the data:
//!
//! ```toml
//! seeds = [0, 1, 2]
//! n_shot = 20
//!
//! [data]
//! train = "train.jsonl"
//!
//! [strategy]
//! strategy = "conf_threshold"
//! t = 0.9
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{BagOfWordsBackend, Featurizer, Hyperparams, SoftmaxModel, TrainError};
use crate::data::{
    default_class_names, load_dataset, sample_n_shot, split_train_test, synthetic_vocabulary,
    DataError, DataFormat, Dataset, SplitSpec, SyntheticCorpus, UnlabeledPool,
};
use crate::engine::{
    evaluate, run_self_training, run_supervised, EngineError, EngineErrorKind, IterationRecord,
    RunOptions, StopReason, TerminationRule,
};
use crate::llm::{
    filter_records, llm_evaluate, llm_pseudo_label, run_labeling_accuracy, select_examples,
    train_slm_on_pseudo_labels, LabelingRun, LlmClient, LlmClientConfig, LlmContext, LlmError,
    LlmMode, PromptTemplate,
};
use crate::metrics::{labeling_accuracy, MetricsReport};
use crate::seed;
use crate::strategies::StrategyConfig;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Engine(#[from] EngineError),
    #[error("llm error: {0}")]
    Llm(#[from] LlmError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<TrainError> for ExperimentError {
    fn from(e: TrainError) -> Self {
        ExperimentError::Engine(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub words_per_class: usize,
    pub noise: f64,
    pub zipf: f64,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            words_per_class: 6000,
            noise: 0.1,
            zipf: 0.9,
            train_counts: vec![187, 187, 187],
            test_counts: vec![200, 200, 200],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    /// Held-out test file; without it the test set is split off `train`.
    pub test: Option<PathBuf>,
    pub format: Option<DataFormat>,
    pub class_names: Vec<String>,
    pub test_fraction: f64,
    /// Share of the training split carved off as validation data (0 disables).
    pub validation_fraction: f64,
    /// Generate the corpus instead of loading files.
    pub synthetic: Option<SyntheticConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            format: None,
            class_names: default_class_names(),
            test_fraction: 0.2,
            validation_fraction: 0.1,
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hash_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub patience: Option<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        let h = Hyperparams::default();
        Self {
            hash_dim: Featurizer::default().dim,
            learning_rate: h.learning_rate,
            epochs: h.epochs,
            l2: h.l2,
            patience: h.patience,
        }
    }
}

impl ClassifierConfig {
    pub fn backend(&self, seed: u64) -> BagOfWordsBackend {
        BagOfWordsBackend::new(
            Featurizer::new(self.hash_dim),
            Hyperparams {
                learning_rate: self.learning_rate,
                epochs: self.epochs,
                l2: self.l2,
                seed,
                patience: self.patience,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub mode: LlmMode,
    /// Score threshold, obj-conf-score only.
    pub threshold: Option<f64>,
    /// Few-shot examples per class placed in the prompt.
    pub n_shot: usize,
    pub fixtures: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub client: LlmClientConfig,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            mode: LlmMode::Obj,
            threshold: None,
            n_shot: 0,
            fixtures: None,
            template: None,
            client: LlmClientConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub n_shot: usize,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub strategy: StrategyConfig,
    pub termination: TerminationRule,
    pub classifier: ClassifierConfig,
    pub llm: Option<LlmConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            n_shot: 20,
            output_dir: None,
            data: DataConfig::default(),
            strategy: StrategyConfig {
                strategy: "conf_threshold".into(),
                t: Some(0.9),
                ..Default::default()
            },
            termination: TerminationRule::default(),
            classifier: ClassifierConfig::default(),
            llm: None,
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl ExperimentConfig {
    pub fn parse(s: &str) -> Result<Self, ExperimentError> {
        toml::from_str(s).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Read and resolve relative paths, without validating.
    pub fn read(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// [`ExperimentConfig::read`] plus validation.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let cfg = Self::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.data.train);
        resolve(base, &mut self.data.test);
        resolve(base, &mut self.output_dir);
        if let Some(llm) = &mut self.llm {
            resolve(base, &mut llm.fixtures);
            resolve(base, &mut llm.template);
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.n_shot == 0 {
            return bad("n_shot must be positive".into());
        }
        let d = &self.data;
        match (&d.train, &d.synthetic) {
            (None, None) => return bad("data.train or data.synthetic is required".into()),
            (Some(_), Some(_)) => return bad("data.train and data.synthetic are exclusive".into()),
            _ => {}
        }
        for p in [&d.train, &d.test].into_iter().flatten() {
            if !p.is_file() {
                return bad(format!("dataset file not found: {}", p.display()));
            }
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return bad(format!("test_fraction {} not in (0, 1)", d.test_fraction));
        }
        if !(0.0..1.0).contains(&d.validation_fraction) {
            return bad(format!("validation_fraction {} not in [0, 1)", d.validation_fraction));
        }
        if let Some(s) = &d.synthetic {
            if s.train_counts.len() != d.class_names.len() || s.test_counts.len() != d.class_names.len() {
                return bad("synthetic counts need one entry per class".into());
            }
        }
        self.strategy
            .resolve()
            .map_err(|e| ExperimentError::Config(format!("strategy: {e}")))?;
        self.termination
            .validate()
            .map_err(|e| ExperimentError::Config(format!("termination: {e}")))?;
        self.classifier
            .backend(0)
            .hyperparams
            .validate()
            .map_err(|e| ExperimentError::Config(format!("classifier: {e}")))?;
        if self.classifier.hash_dim == 0 || self.classifier.hash_dim > u32::MAX as usize {
            return bad("classifier.hash_dim out of range".into());
        }
        if let Some(llm) = &self.llm {
            llm.client.validate().map_err(ExperimentError::Config)?;
            if llm.fixtures.is_none() && llm.client.endpoint.is_none() {
                return bad("llm needs either fixtures or client.endpoint".into());
            }
            for p in [&llm.fixtures, &llm.template].into_iter().flatten() {
                if !p.is_file() {
                    return bad(format!("file not found: {}", p.display()));
                }
            }
            match (llm.mode, llm.threshold) {
                (LlmMode::ObjConfScore, None) => return bad("obj-conf-score needs llm.threshold".into()),
                (LlmMode::ObjConfScore, Some(_)) | (_, None) => {}
                (m, Some(_)) => return bad(format!("llm.threshold does not apply to mode {m}")),
            }
        }
        Ok(())
    }

    /// The config with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Every seed a run uses, derived from a root seed. Data preparation and
/// model training hang off `root`; selection and LLM retry jitter hang off
/// `cell`, which equals `root` except inside sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTree {
    pub root: u64,
    pub cell: u64,
    pub synthetic: u64,
    pub split: u64,
    pub validation: u64,
    pub n_shot: u64,
    pub classifier: u64,
    pub selection: u64,
    pub llm_examples: u64,
    pub llm_retry: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self::for_cell(root, root)
    }

    pub fn for_cell(root: u64, cell: u64) -> Self {
        Self {
            root,
            cell,
            synthetic: seed::derive(root, "synthetic"),
            split: seed::derive(root, "split"),
            validation: seed::derive(root, "validation"),
            n_shot: seed::derive(root, "n_shot"),
            classifier: seed::derive(root, "classifier"),
            llm_examples: seed::derive(root, "llm_examples"),
            selection: seed::derive(cell, "selection"),
            llm_retry: seed::derive(cell, "llm_retry"),
        }
    }
}

/// The data one run sees.
#[derive(Debug, Clone)]
pub struct Splits {
    pub labeled: Dataset,
    pub pool: UnlabeledPool,
    pub validation: Option<Dataset>,
    pub test: Dataset,
}

fn load(cfg: &DataConfig, path: &Path) -> Result<Dataset, DataError> {
    let format = cfg.format.unwrap_or_else(|| DataFormat::from_path(path));
    load_dataset(path, format, &cfg.class_names)
}

/// Load or generate the corpus, split off test and validation data, and
/// draw the n-shot labeled set.
pub fn prepare_splits(cfg: &ExperimentConfig, seeds: &SeedTree) -> Result<Splits, ExperimentError> {
    let d = &cfg.data;
    let (train, test) = if let Some(s) = &d.synthetic {
        let corpus = SyntheticCorpus::new(synthetic_vocabulary(d.class_names.len(), s.words_per_class), s.noise)
            .with_zipf(s.zipf)
            .with_class_names(d.class_names.clone());
        let train = corpus.generate(&s.train_counts, seeds.synthetic)?;
        let test = corpus.generate(&s.test_counts, seed::derive(seeds.synthetic, "test"))?;
        (train, test)
    } else {
        let full = load(d, cfg.data.train.as_ref().expect("validated"))?;
        match &d.test {
            Some(p) => (full, load(d, p)?),
            None => split_train_test(&full, &SplitSpec::new(d.test_fraction, seeds.split)?)?,
        }
    };
    let (train, validation) = if d.validation_fraction > 0.0 {
        let (rest, val) = split_train_test(&train, &SplitSpec::new(d.validation_fraction, seeds.validation)?)?;
        (rest, Some(val))
    } else {
        (train, None)
    };
    let (labeled, pool) = sample_n_shot(&train, cfg.n_shot, seeds.n_shot)?;
    Ok(Splits {
        labeled,
        pool,
        validation,
        test,
    })
}

/// What a single run produces.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seeds: SeedTree,
    pub model: SoftmaxModel,
    pub metrics: MetricsReport,
    pub history: Vec<IterationRecord>,
    pub stop_reason: Option<StopReason>,
    pub records: Option<LabelingRun>,
    /// Pool instances incorporated into training.
    pub num_added: usize,
}

/// Supervised baseline on the n-shot labeled set.
pub fn run_train(cfg: &ExperimentConfig, seeds: SeedTree) -> Result<RunResult, ExperimentError> {
    let s = prepare_splits(cfg, &seeds)?;
    let backend = cfg.classifier.backend(seeds.classifier);
    let opts = RunOptions {
        seed: seeds.selection,
        validation: s.validation.as_ref(),
    };
    let model = run_supervised(&backend, &s.labeled, opts)?;
    let metrics = evaluate(&model, &s.test)?;
    Ok(RunResult {
        seeds,
        model,
        metrics,
        history: Vec::new(),
        stop_reason: None,
        records: None,
        num_added: 0,
    })
}

/// Self-training from the n-shot labeled set. The report's
/// `labeling_accuracy` covers every hard pseudo-label migrated.
pub fn run_selftrain(cfg: &ExperimentConfig, seeds: SeedTree) -> Result<RunResult, ExperimentError> {
    let s = prepare_splits(cfg, &seeds)?;
    let strategy = cfg
        .strategy
        .resolve()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let backend = cfg.classifier.backend(seeds.classifier);
    let opts = RunOptions {
        seed: seeds.selection,
        validation: s.validation.as_ref(),
    };
    let out = run_self_training(&backend, &s.labeled, &s.pool, &strategy, &cfg.termination, opts)?;
    let mut metrics = evaluate(&out.model, &s.test)?;
    let migrated: Vec<(String, usize)> = out.history.iter().flat_map(|r| r.selected.iter().cloned()).collect();
    metrics.labeling_accuracy = labeling_accuracy(&migrated, s.pool.shadow()).ok();
    let num_added = if strategy.is_soft() {
        out.history.last().map_or(0, |r| r.num_selected)
    } else {
        migrated.len()
    };
    Ok(RunResult {
        seeds,
        model: out.model,
        metrics,
        history: out.history,
        stop_reason: Some(out.stop_reason),
        records: None,
        num_added,
    })
}

fn template(llm: &LlmConfig) -> Result<PromptTemplate, ExperimentError> {
    match &llm.template {
        Some(p) => PromptTemplate::load(p).map_err(|e| ExperimentError::Config(e.to_string())),
        None => Ok(PromptTemplate::default()),
    }
}

/// LLM run. Subject mode evaluates the LLM on the test set; the object modes
/// label the pool, filter, and train the small model on the result.
pub fn run_llm<C: LlmClient + ?Sized>(
    cfg: &ExperimentConfig,
    seeds: SeedTree,
    client: &C,
) -> Result<RunResult, ExperimentError> {
    let llm = cfg
        .llm
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("no [llm] block".into()))?;
    let s = prepare_splits(cfg, &seeds)?;
    let template = template(llm)?;
    let examples = select_examples(&s.labeled, llm.n_shot, seeds.llm_examples)?;
    let client_cfg = LlmClientConfig {
        retry_seed: seeds.llm_retry,
        ..llm.client.clone()
    };
    let ctx = LlmContext {
        client,
        config: &client_cfg,
        template: &template,
        class_names: s.labeled.class_names(),
        examples: &examples,
    };
    let backend = cfg.classifier.backend(seeds.classifier);
    if llm.mode == LlmMode::Sub {
        let (metrics, run) = llm_evaluate(&ctx, &s.test)?;
        let model = run_supervised(&backend, &s.labeled, RunOptions::default())?;
        return Ok(RunResult {
            seeds,
            model,
            metrics,
            history: Vec::new(),
            stop_reason: None,
            records: Some(run),
            num_added: 0,
        });
    }
    let run = llm_pseudo_label(&ctx, s.pool.instances(), llm.mode)?;
    let kept = filter_records(&run.entries, llm.mode, llm.threshold)
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let model = train_slm_on_pseudo_labels(&backend, &kept, &s.labeled, &s.pool, s.validation.as_ref())?;
    let mut metrics = evaluate(&model, &s.test)?;
    metrics.labeling_accuracy = labeling_accuracy(&kept, s.pool.shadow()).ok();
    if metrics.labeling_accuracy.is_none() {
        metrics.labeling_accuracy = run_labeling_accuracy(&run, &s.pool);
    }
    Ok(RunResult {
        seeds,
        model,
        metrics,
        history: Vec::new(),
        stop_reason: None,
        records: Some(run),
        num_added: kept.len(),
    })
}

/// Exit-code class of an error: config 2, data 3, training 4, llm 5, io 6.
pub fn exit_code(e: &ExperimentError) -> i32 {
    match e {
        ExperimentError::Config(_) => 2,
        ExperimentError::Data(_) => 3,
        ExperimentError::Engine(e) => match e.kind {
            EngineErrorKind::Data(_) | EngineErrorKind::ClassMismatch | EngineErrorKind::MissingClass(_) => 3,
            EngineErrorKind::Strategy(_) | EngineErrorKind::Termination(_) => 2,
            _ => 4,
        },
        ExperimentError::Llm(e) => match e {
            LlmError::Data(_) => 3,
            LlmError::Engine(_) => 4,
            LlmError::Config(_) => 2,
            _ => 5,
        },
        ExperimentError::Io(_) => 6,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic() -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig {
                synthetic: Some(SyntheticConfig {
                    words_per_class: 50,
                    noise: 0.0,
                    zipf: 0.0,
                    train_counts: vec![40, 40, 40],
                    test_counts: vec![20, 20, 20],
                }),
                ..Default::default()
            },
            n_shot: 5,
            seeds: vec![1],
            ..Default::default()
        }
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = synthetic();
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse("seedz = [1]").is_err());
        assert!(ExperimentConfig::parse("[strategy]\nstrategy = \"conf_threshold\"\nthreshold = 0.9").is_err());
        assert!(ExperimentConfig::parse("[termination]\npatiense = 2").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = synthetic();
        cfg.strategy.strategy = "confidence".into();
        assert!(matches!(cfg.validate(), Err(ExperimentError::Config(_))));
        let mut cfg = synthetic();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = synthetic();
        cfg.data.synthetic = None;
        cfg.data.train = Some("/definitely/missing.jsonl".into());
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("/definitely/missing.jsonl"), "{msg}");
    }

    #[test]
    fn seed_tree_separates_cell_randomness() {
        let a = SeedTree::new(5);
        let b = SeedTree::for_cell(5, 99);
        assert_eq!(a.split, b.split);
        assert_eq!(a.classifier, b.classifier);
        assert_ne!(a.selection, b.selection);
        assert_ne!(a.split, a.n_shot);
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let cfg = synthetic();
        let s = prepare_splits(&cfg, &SeedTree::new(1)).unwrap();
        assert_eq!(s.labeled.len(), 15);
        let val = s.validation.as_ref().unwrap();
        assert_eq!(val.len(), 12);
        assert_eq!(s.labeled.len() + s.pool.len() + val.len(), 120);
        assert_eq!(s.test.len(), 60);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = synthetic();
        let a = run_selftrain(&cfg, SeedTree::new(1)).unwrap();
        let b = run_selftrain(&cfg, SeedTree::new(1)).unwrap();
        assert_eq!(a.model.to_json(), b.model.to_json());
        assert_eq!(a.history, b.history);
        assert_eq!(a.metrics, b.metrics);
        assert!(a.metrics.macro_f1 > 0.8);
    }
}
