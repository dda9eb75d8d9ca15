//! LLM-assisted labeling.
//!
//! In subject mode ([`LlmMode::Sub`]) the LLM is the classifier. In the object
//! modes it pseudo-labels the unlabeled pool and a small model is trained on
//! the gold seed plus the kept pseudo-labels:
//!
//! * [`LlmMode::Obj`] keeps every pseudo-label,
//! * [`LlmMode::ObjConf`] keeps labels the LLM says it is confident in,
//! * [`LlmMode::ObjConfScore`] keeps labels whose self-reported score is
//!   strictly above a threshold.

pub mod client;
pub mod mock;
pub mod prompt;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierBackend, TrainRecord, TrainTarget};
use crate::data::{sample_n_shot, DataError, Dataset, PoolInstance, UnlabeledPool};
use crate::engine::{gold_records, EngineError, EngineErrorKind};
use crate::metrics::{self, MetricsReport};

pub use client::{
    complete_with_retry, ChatRequest, Completion, HttpChatClient, LlmClient, LlmClientConfig,
    RetryExhausted, TransportError,
};
pub use mock::{fixtures_to_jsonl, script_fixture, FixtureEntry, FixtureError, MockClient};
pub use prompt::{AnswerFormat, ChatMessage, ParseError, PromptTemplate, ResponseParser};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LlmMode {
    Sub,
    Obj,
    ObjConf,
    ObjConfScore,
}

impl LlmMode {
    pub fn answer_format(self) -> AnswerFormat {
        match self {
            LlmMode::Sub | LlmMode::Obj => AnswerFormat::Label,
            LlmMode::ObjConf => AnswerFormat::LabelConfidence,
            LlmMode::ObjConfScore => AnswerFormat::LabelScore,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LlmMode::Sub => "sub",
            LlmMode::Obj => "obj",
            LlmMode::ObjConf => "obj-conf",
            LlmMode::ObjConfScore => "obj-conf-score",
        }
    }
}

impl fmt::Display for LlmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LlmMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sub" => Ok(LlmMode::Sub),
            "obj" => Ok(LlmMode::Obj),
            "obj-conf" => Ok(LlmMode::ObjConf),
            "obj-conf-score" => Ok(LlmMode::ObjConfScore),
            other => Err(format!("unknown LLM mode {other:?} (expected sub, obj, obj-conf or obj-conf-score)")),
        }
    }
}

/// A parsed LLM answer for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmLabelRecord {
    pub instance_id: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confident: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub raw_response: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Transport,
    Parse,
    PromptTooLong,
}

/// Stands in for the record of an instance that could not be labeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureMarker {
    pub instance_id: String,
    pub kind: FailureKind,
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    pub attempts: u32,
}

/// One line of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RecordEntry {
    Ok(LlmLabelRecord),
    Failed(FailureMarker),
}

impl RecordEntry {
    pub fn instance_id(&self) -> &str {
        match self {
            RecordEntry::Ok(r) => &r.instance_id,
            RecordEntry::Failed(f) => &f.instance_id,
        }
    }

    pub fn record(&self) -> Option<&LlmLabelRecord> {
        match self {
            RecordEntry::Ok(r) => Some(r),
            RecordEntry::Failed(_) => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("instance {instance_id:?}: transport failed after {attempts} attempts: {source}")]
    Transport {
        instance_id: String,
        attempts: u32,
        source: TransportError,
    },
    #[error("instance {instance_id:?}: {source}")]
    Parse {
        instance_id: String,
        attempts: u32,
        source: ParseError,
    },
    #[error("instance {instance_id:?}: prompt has {chars} characters, limit is {limit}")]
    PromptTooLong {
        instance_id: String,
        chars: usize,
        limit: usize,
    },
    #[error("{failed} of {total} instances failed, above the {limit} limit")]
    TooManyFailures {
        failed: usize,
        total: usize,
        limit: f64,
        run: Box<LabelingRun>,
    },
    #[error("nothing to label")]
    EmptyPool,
    #[error("invalid LLM configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("pseudo-label for unknown instance {0:?}")]
    UnknownInstance(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl LlmError {
    fn into_marker(self) -> FailureMarker {
        match self {
            LlmError::Transport {
                instance_id,
                attempts,
                source,
            } => FailureMarker {
                instance_id,
                kind: FailureKind::Transport,
                error: source.to_string(),
                raw_response: None,
                attempts,
            },
            LlmError::Parse {
                instance_id,
                attempts,
                source,
            } => {
                let raw = match &source {
                    ParseError::NoClass { raw }
                    | ParseError::Ambiguous { raw, .. }
                    | ParseError::MissingConfidence { raw }
                    | ParseError::MissingScore { raw }
                    | ParseError::ScoreOutOfRange { raw, .. } => raw.clone(),
                };
                FailureMarker {
                    instance_id,
                    kind: FailureKind::Parse,
                    error: source.to_string(),
                    raw_response: Some(raw),
                    attempts,
                }
            }
            LlmError::PromptTooLong {
                instance_id,
                chars,
                limit,
            } => FailureMarker {
                instance_id,
                kind: FailureKind::PromptTooLong,
                error: format!("prompt has {chars} characters, limit is {limit}"),
                raw_response: None,
                attempts: 0,
            },
            other => unreachable!("not a per-instance error: {other}"),
        }
    }
}

/// Everything needed to query the LLM about one text.
pub struct LlmContext<'a, C: LlmClient + ?Sized> {
    pub client: &'a C,
    pub config: &'a LlmClientConfig,
    pub template: &'a PromptTemplate,
    pub class_names: &'a [String],
    /// Few-shot examples as (text, class), already in prompt order.
    pub examples: &'a [(String, usize)],
}

/// Draw `n_shot` examples per class from `labeled` and interleave them by
/// class (c0, c1, c2, c0, ...). Zero yields no examples.
pub fn select_examples(
    labeled: &Dataset,
    n_shot: usize,
    seed: u64,
) -> Result<Vec<(String, usize)>, DataError> {
    if n_shot == 0 {
        return Ok(Vec::new());
    }
    let (picked, _) = sample_n_shot(labeled, n_shot, seed)?;
    let mut by_class: Vec<Vec<String>> = vec![Vec::new(); labeled.num_classes()];
    for inst in picked.instances() {
        by_class[inst.gold_label.expect("sampled instances are labeled")].push(inst.text.clone());
    }
    let mut out = Vec::with_capacity(n_shot * by_class.len());
    for k in 0..n_shot {
        for (c, texts) in by_class.iter().enumerate() {
            out.push((texts[k].clone(), c));
        }
    }
    Ok(out)
}

/// Render, send (with retries) and parse one query.
pub fn llm_query<C: LlmClient + ?Sized>(
    ctx: &LlmContext<'_, C>,
    parser: &ResponseParser,
    instance_id: &str,
    text: &str,
    mode: LlmMode,
) -> Result<LlmLabelRecord, LlmError> {
    let format = mode.answer_format();
    let request = ChatRequest {
        instance_id: instance_id.to_string(),
        messages: ctx.template.render(ctx.class_names, ctx.examples, text, format),
    };
    if let Some(limit) = ctx.config.max_prompt_chars {
        let chars = request.prompt_chars();
        if chars > limit {
            return Err(LlmError::PromptTooLong {
                instance_id: instance_id.to_string(),
                chars,
                limit,
            });
        }
    }
    let completion = complete_with_retry(ctx.client, ctx.config, &request).map_err(|e| {
        LlmError::Transport {
            instance_id: instance_id.to_string(),
            attempts: e.attempts,
            source: e.source,
        }
    })?;
    let parsed = parser
        .parse(&completion.text, format)
        .map_err(|source| LlmError::Parse {
            instance_id: instance_id.to_string(),
            attempts: completion.attempts,
            source,
        })?;
    Ok(LlmLabelRecord {
        instance_id: instance_id.to_string(),
        label: parsed.label,
        confident: parsed.confident,
        score: parsed.score,
        raw_response: completion.text,
        attempts: completion.attempts,
    })
}

/// Subject mode: the LLM classifies `text`.
pub fn llm_classify<C: LlmClient + ?Sized>(
    ctx: &LlmContext<'_, C>,
    instance_id: &str,
    text: &str,
) -> Result<usize, LlmError> {
    let parser = ResponseParser::new(ctx.class_names);
    llm_query(ctx, &parser, instance_id, text, LlmMode::Sub).map(|r| r.label)
}

/// Outcome of labeling a pool: one entry per instance, ordered by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelingRun {
    pub entries: Vec<RecordEntry>,
}

impl LabelingRun {
    pub fn records(&self) -> impl Iterator<Item = &LlmLabelRecord> {
        self.entries.iter().filter_map(RecordEntry::record)
    }

    pub fn failures(&self) -> impl Iterator<Item = &FailureMarker> {
        self.entries.iter().filter_map(|e| match e {
            RecordEntry::Failed(f) => Some(f),
            RecordEntry::Ok(_) => None,
        })
    }

    pub fn num_failed(&self) -> usize {
        self.failures().count()
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).unwrap() + "\n")
            .collect()
    }
}

/// Query the LLM for every pool instance with at most `max_in_flight`
/// requests outstanding. Per-instance failures become [`FailureMarker`]s; the
/// run fails only if their fraction exceeds the configured limit.
pub fn llm_pseudo_label<C: LlmClient + ?Sized>(
    ctx: &LlmContext<'_, C>,
    pool: &[PoolInstance],
    mode: LlmMode,
) -> Result<LabelingRun, LlmError> {
    ctx.config.validate().map_err(LlmError::Config)?;
    if pool.is_empty() {
        return Err(LlmError::EmptyPool);
    }
    let parser = ResponseParser::new(ctx.class_names);
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<(usize, RecordEntry)>> = Mutex::new(Vec::with_capacity(pool.len()));
    let workers = ctx.config.max_in_flight.min(pool.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(inst) = pool.get(i) else { break };
                let entry = match llm_query(ctx, &parser, &inst.id, &inst.text, mode) {
                    Ok(r) => RecordEntry::Ok(r),
                    Err(e) => {
                        log::debug!("{e}");
                        RecordEntry::Failed(e.into_marker())
                    }
                };
                done.lock().unwrap().push((i, entry));
            });
        }
    });
    let mut done = done.into_inner().unwrap();
    done.sort_by(|a, b| pool[a.0].id.cmp(&pool[b.0].id).then(a.0.cmp(&b.0)));
    let run = LabelingRun {
        entries: done.into_iter().map(|(_, e)| e).collect(),
    };
    let failed = run.num_failed();
    let total = run.entries.len();
    if failed as f64 > ctx.config.failure_limit * total as f64 {
        return Err(LlmError::TooManyFailures {
            failed,
            total,
            limit: ctx.config.failure_limit,
            run: Box::new(run),
        });
    }
    if failed > 0 {
        log::warn!("{failed} of {total} instances could not be labeled");
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("obj-conf-score needs a threshold")]
    ThresholdRequired,
    #[error("a threshold only applies to obj-conf-score")]
    ThresholdNotAllowed,
    #[error("threshold {0} is not a finite number")]
    BadThreshold(f64),
    #[error("record {id:?} has no {field} field")]
    MissingField { id: String, field: &'static str },
    #[error("subject mode produces no pseudo-labels")]
    SubjectMode,
}

/// Pseudo-labels kept under `mode`. Failure markers are skipped.
pub fn filter_records(
    entries: &[RecordEntry],
    mode: LlmMode,
    threshold: Option<f64>,
) -> Result<Vec<(String, usize)>, FilterError> {
    match (mode, threshold) {
        (LlmMode::Sub, _) => return Err(FilterError::SubjectMode),
        (LlmMode::ObjConfScore, None) => return Err(FilterError::ThresholdRequired),
        (LlmMode::ObjConfScore, Some(t)) if !t.is_finite() => return Err(FilterError::BadThreshold(t)),
        (LlmMode::Obj | LlmMode::ObjConf, Some(_)) => return Err(FilterError::ThresholdNotAllowed),
        _ => {}
    }
    let mut kept = Vec::new();
    for r in entries.iter().filter_map(RecordEntry::record) {
        let keep = match mode {
            LlmMode::Obj => true,
            LlmMode::ObjConf => r.confident.ok_or_else(|| FilterError::MissingField {
                id: r.instance_id.clone(),
                field: "confident",
            })?,
            LlmMode::ObjConfScore => {
                let s = r.score.ok_or_else(|| FilterError::MissingField {
                    id: r.instance_id.clone(),
                    field: "score",
                })?;
                s > threshold.unwrap()
            }
            LlmMode::Sub => unreachable!(),
        };
        if keep {
            kept.push((r.instance_id.clone(), r.label));
        }
    }
    Ok(kept)
}

/// Train once on the gold seed plus the kept pseudo-labels. Gold wins on an
/// id collision; pseudo-labeled texts come from `pool`.
pub fn train_slm_on_pseudo_labels<B: ClassifierBackend>(
    backend: &B,
    filtered: &[(String, usize)],
    labeled_seed: &Dataset,
    pool: &UnlabeledPool,
    validation: Option<&Dataset>,
) -> Result<B::Model, LlmError> {
    let mut records = gold_records(labeled_seed)?;
    let gold_ids: HashSet<&str> = labeled_seed.ids().collect();
    let mut pseudo: Vec<&(String, usize)> = filtered
        .iter()
        .filter(|(id, _)| !gold_ids.contains(id.as_str()))
        .collect();
    pseudo.sort();
    pseudo.dedup_by(|a, b| a.0 == b.0);
    for (id, label) in pseudo {
        let inst = pool.get(id).ok_or_else(|| LlmError::UnknownInstance(id.clone()))?;
        records.push(TrainRecord {
            id: id.clone(),
            text: inst.text.clone(),
            target: TrainTarget::Hard(*label),
        });
    }
    let val = validation.map(gold_records).transpose()?;
    backend
        .train(labeled_seed.num_classes(), &records, val.as_deref())
        .map_err(|e| LlmError::Engine(EngineError::from(EngineErrorKind::Train(e))))
}

/// Subject-mode evaluation over a gold-labeled test set. Instances the LLM
/// could not label are left out of the metrics and counted in a flag.
pub fn llm_evaluate<C: LlmClient + ?Sized>(
    ctx: &LlmContext<'_, C>,
    test: &Dataset,
) -> Result<(MetricsReport, LabelingRun), LlmError> {
    let gold = test.gold_labels()?;
    let items: Vec<PoolInstance> = test
        .instances()
        .iter()
        .map(|i| PoolInstance {
            id: i.id.clone(),
            text: i.text.clone(),
        })
        .collect();
    let run = llm_pseudo_label(ctx, &items, LlmMode::Sub)?;
    let gold_by_id: std::collections::HashMap<&str, usize> =
        test.ids().zip(gold.iter().copied()).collect();
    let (g, p): (Vec<usize>, Vec<usize>) = run
        .records()
        .map(|r| (gold_by_id[r.instance_id.as_str()], r.label))
        .unzip();
    let mut report = MetricsReport::compute(&g, &p, test.class_names())
        .map_err(|e| LlmError::Engine(EngineError::from(e)))?;
    let failed = run.num_failed();
    if failed > 0 {
        report.flags.push(format!("llm_failures:{failed}"));
    }
    Ok((report, run))
}

/// Fraction of the run's labels that match the pool's shadow gold labels.
pub fn run_labeling_accuracy(run: &LabelingRun, pool: &UnlabeledPool) -> Option<f64> {
    let pairs: Vec<(String, usize)> = run
        .records()
        .map(|r| (r.instance_id.clone(), r.label))
        .collect();
    metrics::labeling_accuracy(&pairs, pool.shadow()).ok()
}
