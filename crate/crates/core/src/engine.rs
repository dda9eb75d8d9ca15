//! The self-training loop and the supervised baseline.
//!
//! ```text
//! train M on T
//! repeat
//!     infer a distribution for every s in T'
//!     T* = select(strategy, predictions)
//!     T  = T ∪ T*,  T' = T' \ T*
//!     retrain M on T
//! until termination
//! ```
//!
//! Each retrain starts from a fresh model, so a run is a deterministic
//! function of its inputs and seeds. In soft-label mode the selected
//! distributions become soft targets for the next retrain but the instances
//! stay in the pool; the soft set is rebuilt from scratch every iteration.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{Classifier, ClassifierBackend, TrainError, TrainRecord, TrainTarget};
use crate::data::{DataError, Dataset, PoolInstance, UnlabeledPool};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::seed;
use crate::strategies::{self, Prediction, SelectionResult, SelectionStrategy, StrategyError};

/// Iteration cap used in soft-label mode when the rule sets none.
pub const DEFAULT_SOFT_MAX_ITERATIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminationRule {
    /// Stop when the strategy selects nothing.
    pub no_more_selectable: bool,
    pub max_iterations: Option<usize>,
    /// Stop after this many iterations without validation improvement.
    /// Ignored when no validation set is given.
    pub patience: Option<usize>,
}

impl Default for TerminationRule {
    fn default() -> Self {
        Self {
            no_more_selectable: true,
            max_iterations: None,
            patience: Some(2),
        }
    }
}

impl TerminationRule {
    pub fn validate(&self) -> Result<(), String> {
        if self.patience == Some(0) {
            return Err("patience must be positive".into());
        }
        if !self.no_more_selectable && self.max_iterations.is_none() && self.patience.is_none() {
            return Err("at least one termination criterion must be enabled".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NoMoreSelectable,
    PoolExhausted,
    MaxIterations,
    Patience,
}

/// One line of `history.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub num_selected: usize,
    /// Hard pseudo-labels migrated this iteration, by id.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selected: Vec<(String, usize)>,
    #[serde(default)]
    pub soft: bool,
    pub pseudo_label_accuracy: Option<f64>,
    pub validation_metric: Option<f64>,
    pub validation_loss: Option<f64>,
    pub labeled_size_after: usize,
    pub pool_size_after: usize,
}

/// Where a labeled entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Gold,
    Pseudo { iteration: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEntry {
    pub id: String,
    pub text: String,
    pub target: TrainTarget,
    pub origin: Origin,
}

/// Loop state, exposed to observers after initialization and after every
/// iteration.
#[derive(Debug, Clone)]
pub struct SelfTrainState {
    pub labeled: Vec<LabeledEntry>,
    pub unlabeled: Vec<PoolInstance>,
    /// Soft targets used by the latest retrain (soft-label mode only).
    pub soft_targets: Vec<LabeledEntry>,
    pub iteration: usize,
    pub history: Vec<IterationRecord>,
}

impl SelfTrainState {
    fn training_records(&self) -> Vec<TrainRecord> {
        self.labeled
            .iter()
            .chain(&self.soft_targets)
            .map(|e| TrainRecord {
                id: e.id.clone(),
                text: e.text.clone(),
                target: e.target.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum EngineErrorKind {
    #[error("labeled set is empty")]
    EmptyLabeled,
    #[error("labeled set has no instance of class {0:?}")]
    MissingClass(String),
    #[error("instance {0:?} appears in both the labeled set and the pool")]
    OverlappingIds(String),
    #[error("class names differ between datasets")]
    ClassMismatch,
    #[error("invalid strategy: {0}")]
    Strategy(#[from] StrategyError),
    #[error("invalid termination rule: {0}")]
    Termination(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training failed: {0}")]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// An engine failure with the history recorded before it happened.
#[derive(Debug, Error)]
#[error("{kind} (after {} iterations)", history.len())]
pub struct EngineError {
    pub kind: EngineErrorKind,
    pub history: Vec<IterationRecord>,
}

impl<E: Into<EngineErrorKind>> From<E> for EngineError {
    fn from(e: E) -> Self {
        EngineError {
            kind: e.into(),
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelfTrainOutcome<M> {
    /// The best model by validation score when a validation set was given,
    /// otherwise the last one trained.
    pub model: M,
    pub history: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    pub final_labeled: usize,
    pub final_pool: usize,
}

/// Options shared by the supervised and self-training entry points.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    /// Root seed for selection randomness.
    pub seed: u64,
    /// Gold-labeled data for patience and inner early stopping.
    pub validation: Option<&'a Dataset>,
}

pub(crate) fn gold_records(ds: &Dataset) -> Result<Vec<TrainRecord>, DataError> {
    let labels = ds.gold_labels()?;
    Ok(ds
        .instances()
        .iter()
        .zip(labels)
        .map(|(i, y)| TrainRecord {
            id: i.id.clone(),
            text: i.text.clone(),
            target: TrainTarget::Hard(y),
        })
        .collect())
}

fn check_labeled(labeled: &Dataset) -> Result<(), EngineErrorKind> {
    if labeled.is_empty() {
        return Err(EngineErrorKind::EmptyLabeled);
    }
    labeled.gold_labels()?;
    let counts = labeled.class_counts();
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(EngineErrorKind::MissingClass(labeled.class_names()[c].clone()));
    }
    Ok(())
}

/// Validation score: macro-F1, then negative mean cross-entropy as tie-break.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ValScore {
    macro_f1: f64,
    loss: f64,
}

impl ValScore {
    fn better_than(&self, other: &ValScore) -> bool {
        self.macro_f1 > other.macro_f1 || (self.macro_f1 == other.macro_f1 && self.loss < other.loss)
    }
}

fn validation_score<M: Classifier>(model: &M, val: &Dataset) -> Result<ValScore, EngineErrorKind> {
    let gold = val.gold_labels()?;
    let mut predicted = Vec::with_capacity(gold.len());
    let mut loss = 0.0;
    for (inst, &y) in val.instances().iter().zip(&gold) {
        let d = model.predict_dist(&inst.text);
        loss -= d.probs()[y].max(f64::MIN_POSITIVE).ln();
        predicted.push(d.argmax());
    }
    let cm = metrics::confusion(&gold, &predicted, val.num_classes())?;
    Ok(ValScore {
        macro_f1: metrics::macro_f1(&cm),
        loss: loss / gold.len().max(1) as f64,
    })
}

/// Supervised baseline: one training run on the labeled set.
pub fn run_supervised<B: ClassifierBackend>(
    backend: &B,
    labeled: &Dataset,
    opts: RunOptions<'_>,
) -> Result<B::Model, EngineError> {
    check_labeled(labeled)?;
    let records = gold_records(labeled)?;
    let val = opts.validation.map(gold_records).transpose()?;
    Ok(backend.train(labeled.num_classes(), &records, val.as_deref())?)
}

/// Predict every pool instance, ordered by id.
pub fn predict_pool<M: Classifier>(model: &M, pool: &[PoolInstance]) -> Vec<Prediction> {
    let mut preds: Vec<Prediction> = pool
        .iter()
        .map(|p| Prediction::new(p.id.clone(), model.predict_dist(&p.text)))
        .collect();
    preds.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    preds
}

pub fn run_self_training<B>(
    backend: &B,
    labeled: &Dataset,
    pool: &UnlabeledPool,
    strategy: &SelectionStrategy,
    termination: &TerminationRule,
    opts: RunOptions<'_>,
) -> Result<SelfTrainOutcome<B::Model>, EngineError>
where
    B: ClassifierBackend,
    B::Model: Clone,
{
    run_self_training_observed(backend, labeled, pool, strategy, termination, opts, |_| {})
}

/// [`run_self_training`] with a callback that sees the state after the
/// initial training and after every iteration.
pub fn run_self_training_observed<B, F>(
    backend: &B,
    labeled: &Dataset,
    pool: &UnlabeledPool,
    strategy: &SelectionStrategy,
    termination: &TerminationRule,
    opts: RunOptions<'_>,
    mut observer: F,
) -> Result<SelfTrainOutcome<B::Model>, EngineError>
where
    B: ClassifierBackend,
    B::Model: Clone,
    F: FnMut(&SelfTrainState),
{
    check_labeled(labeled)?;
    strategy.validate()?;
    termination.validate().map_err(EngineErrorKind::Termination)?;
    if labeled.class_names() != pool.class_names() {
        return Err(EngineErrorKind::ClassMismatch.into());
    }
    let labeled_ids: HashSet<&str> = labeled.ids().collect();
    if let Some(p) = pool.instances().iter().find(|p| labeled_ids.contains(p.id.as_str())) {
        return Err(EngineErrorKind::OverlappingIds(p.id.clone()).into());
    }
    if let Some(v) = opts.validation {
        if v.class_names() != labeled.class_names() {
            return Err(EngineErrorKind::ClassMismatch.into());
        }
    }

    let num_classes = labeled.num_classes();
    let soft_mode = strategy.is_soft();
    let max_iterations = match termination.max_iterations {
        Some(m) => Some(m),
        None if soft_mode => Some(DEFAULT_SOFT_MAX_ITERATIONS),
        None => None,
    };
    let patience = termination.patience.filter(|_| opts.validation.is_some());
    let val_records = opts.validation.map(gold_records).transpose()?;
    let select_seed = seed::derive(opts.seed, "select");

    let mut state = SelfTrainState {
        labeled: gold_records(labeled)?
            .into_iter()
            .map(|r| LabeledEntry {
                id: r.id,
                text: r.text,
                target: r.target,
                origin: Origin::Gold,
            })
            .collect(),
        unlabeled: pool.instances().to_vec(),
        soft_targets: Vec::new(),
        iteration: 0,
        history: Vec::new(),
    };

    let fail = |kind: EngineErrorKind, history: &[IterationRecord]| EngineError {
        kind,
        history: history.to_vec(),
    };

    let mut model = backend
        .train(num_classes, &state.training_records(), val_records.as_deref())
        .map_err(|e| fail(e.into(), &state.history))?;
    let mut best = match opts.validation {
        Some(v) => Some((
            validation_score(&model, v).map_err(|e| fail(e, &state.history))?,
            model.clone(),
        )),
        None => None,
    };
    let mut stale = 0usize;
    observer(&state);

    let stop_reason = loop {
        if max_iterations.is_some_and(|m| state.iteration >= m) {
            break StopReason::MaxIterations;
        }
        if state.unlabeled.is_empty() {
            break StopReason::PoolExhausted;
        }
        state.iteration += 1;
        let iteration = state.iteration;

        let predictions = predict_pool(&model, &state.unlabeled);
        let selection = strategies::select(
            strategy,
            &predictions,
            seed::derive_u64(select_seed, iteration as u64),
        );
        let num_selected = selection.len();

        let mut record = IterationRecord {
            iteration,
            num_selected,
            selected: Vec::new(),
            soft: soft_mode,
            pseudo_label_accuracy: None,
            validation_metric: None,
            validation_loss: None,
            labeled_size_after: state.labeled.len(),
            pool_size_after: state.unlabeled.len(),
        };

        if num_selected == 0 {
            state.history.push(record);
            observer(&state);
            if termination.no_more_selectable {
                break StopReason::NoMoreSelectable;
            }
            // Same training set, same model: only patience can advance.
            if patience.is_some() {
                stale += 1;
                if patience.is_some_and(|p| stale >= p) {
                    break StopReason::Patience;
                }
            }
            continue;
        }

        let audited: Vec<(String, usize)> = match selection {
            SelectionResult::Hard(chosen) => {
                let picked: HashSet<&str> = chosen.iter().map(|(id, _)| id.as_str()).collect();
                let (moved, kept): (Vec<PoolInstance>, Vec<PoolInstance>) = std::mem::take(&mut state.unlabeled)
                    .into_iter()
                    .partition(|p| picked.contains(p.id.as_str()));
                state.unlabeled = kept;
                let labels: std::collections::HashMap<&str, usize> =
                    chosen.iter().map(|(id, y)| (id.as_str(), *y)).collect();
                for p in moved {
                    let y = labels[p.id.as_str()];
                    state.labeled.push(LabeledEntry {
                        id: p.id,
                        text: p.text,
                        target: TrainTarget::Hard(y),
                        origin: Origin::Pseudo { iteration },
                    });
                }
                record.selected = chosen.clone();
                chosen
            }
            SelectionResult::Soft(chosen) => {
                let texts: std::collections::HashMap<&str, &str> = state
                    .unlabeled
                    .iter()
                    .map(|p| (p.id.as_str(), p.text.as_str()))
                    .collect();
                let soft_targets: Vec<LabeledEntry> = chosen
                    .iter()
                    .map(|(id, dist)| LabeledEntry {
                        id: id.clone(),
                        text: texts[id.as_str()].to_string(),
                        target: TrainTarget::Soft(dist.clone()),
                        origin: Origin::Pseudo { iteration },
                    })
                    .collect();
                state.soft_targets = soft_targets;
                chosen.into_iter().map(|(id, d)| (id, d.argmax())).collect()
            }
        };

        let shadow = pool.shadow();
        if audited.iter().all(|(id, _)| shadow.get(id).is_some()) {
            record.pseudo_label_accuracy = metrics::labeling_accuracy(&audited, shadow).ok();
        }

        model = match backend.train(num_classes, &state.training_records(), val_records.as_deref()) {
            Ok(m) => m,
            Err(e) => {
                state.history.push(record);
                return Err(fail(e.into(), &state.history));
            }
        };

        let mut patience_tripped = false;
        if let Some(v) = opts.validation {
            let score = validation_score(&model, v).map_err(|e| fail(e, &state.history))?;
            record.validation_metric = Some(score.macro_f1);
            record.validation_loss = Some(score.loss);
            let (best_score, best_model) = best.as_mut().expect("best set with validation");
            if score.better_than(best_score) {
                *best_score = score;
                *best_model = model.clone();
                stale = 0;
            } else {
                stale += 1;
                patience_tripped = patience.is_some_and(|p| stale >= p);
            }
        }

        record.labeled_size_after = state.labeled.len();
        record.pool_size_after = state.unlabeled.len();
        state.history.push(record);
        observer(&state);
        if patience_tripped {
            break StopReason::Patience;
        }
    };

    let final_model = best.map(|(_, m)| m).unwrap_or(model);
    Ok(SelfTrainOutcome {
        model: final_model,
        final_labeled: state.labeled.len(),
        final_pool: state.unlabeled.len(),
        history: state.history,
        stop_reason,
    })
}

/// Accuracy, macro-F1 and confusion matrix on a gold-labeled set.
pub fn evaluate<M: Classifier>(model: &M, test: &Dataset) -> Result<MetricsReport, EngineError> {
    let gold = test.gold_labels()?;
    let predicted: Vec<usize> = test
        .instances()
        .iter()
        .map(|i| model.predict_label(&i.text))
        .collect();
    Ok(MetricsReport::compute(&gold, &predicted, test.class_names())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{BagOfWordsBackend, Featurizer, Hyperparams};
    use crate::data::{default_class_names, Instance};
    use crate::strategies::StrategyKind;

    fn backend() -> BagOfWordsBackend {
        BagOfWordsBackend::new(
            Featurizer::new(1 << 12),
            Hyperparams {
                epochs: 30,
                ..Hyperparams::default()
            },
        )
    }

    fn ds(rows: &[(&str, &str, Option<usize>)]) -> Dataset {
        Dataset::new(
            rows.iter()
                .map(|(id, t, y)| Instance::new(*id, *t, *y))
                .collect(),
            default_class_names(),
            "fixture",
        )
        .unwrap()
    }

    fn labeled() -> Dataset {
        ds(&[
            ("l0", "great good happy", Some(0)),
            ("l1", "bad awful sad", Some(1)),
            ("l2", "table chair report", Some(2)),
        ])
    }

    #[test]
    fn zero_selection_returns_supervised_model() {
        let pool = UnlabeledPool::from_dataset(&ds(&[
            ("u0", "unknown words entirely", None),
            ("u1", "nothing familiar here", None),
        ]));
        let strategy = SelectionStrategy::new(StrategyKind::ConfThreshold { t: 1.0 });
        let out = run_self_training(
            &backend(),
            &labeled(),
            &pool,
            &strategy,
            &TerminationRule::default(),
            RunOptions::default(),
        )
        .unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history[0].num_selected, 0);
        assert_eq!(out.stop_reason, StopReason::NoMoreSelectable);
        let sl = run_supervised(&backend(), &labeled(), RunOptions::default()).unwrap();
        assert_eq!(out.model, sl);
    }

    #[test]
    fn single_class_labeled_set_is_rejected() {
        let only_pos = ds(&[("a", "good", Some(0)), ("b", "great", Some(0))]);
        let err = run_supervised(&backend(), &only_pos, RunOptions::default()).unwrap_err();
        assert!(matches!(err.kind, EngineErrorKind::MissingClass(c) if c == "negative"));
    }

    #[test]
    fn overlapping_ids_rejected() {
        let pool = UnlabeledPool::from_dataset(&ds(&[("l0", "dup", None)]));
        let s = SelectionStrategy::new(StrategyKind::SoftLabel);
        let err = run_self_training(
            &backend(),
            &labeled(),
            &pool,
            &s,
            &TerminationRule::default(),
            RunOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err.kind, EngineErrorKind::OverlappingIds(_)));
    }

    #[test]
    fn termination_rule_needs_a_criterion() {
        let none = TerminationRule {
            no_more_selectable: false,
            max_iterations: None,
            patience: None,
        };
        assert!(none.validate().is_err());
        assert!(TerminationRule::default().validate().is_ok());
    }

    #[test]
    fn random_batches_exhaust_pool() {
        let rows: Vec<(String, String)> = (0..25)
            .map(|i| (format!("u{i:02}"), format!("word{} other{}", i % 7, i % 3)))
            .collect();
        let pool_ds = Dataset::new(
            rows.iter().map(|(id, t)| Instance::new(id.clone(), t.clone(), None)).collect(),
            default_class_names(),
            "p",
        )
        .unwrap();
        let pool = UnlabeledPool::from_dataset(&pool_ds);
        let s = SelectionStrategy::new(StrategyKind::RandomBatch { b: 10 });
        let out = run_self_training(
            &backend(),
            &labeled(),
            &pool,
            &s,
            &TerminationRule::default(),
            RunOptions { seed: 3, validation: None },
        )
        .unwrap();
        let sizes: Vec<usize> = out.history.iter().map(|r| r.num_selected).collect();
        assert_eq!(sizes, [10, 10, 5]);
        assert_eq!(out.stop_reason, StopReason::PoolExhausted);
        assert_eq!(out.final_labeled, 28);
        assert_eq!(out.final_pool, 0);
        // unlabeled pool carries no gold, so no audit is possible
        assert!(out.history.iter().all(|r| r.pseudo_label_accuracy.is_none()));
    }

    #[test]
    fn soft_mode_keeps_pool_and_stops_at_default_cap() {
        let pool = UnlabeledPool::from_dataset(&ds(&[
            ("u0", "great happy", Some(0)),
            ("u1", "awful sad", Some(1)),
            ("u2", "chair report", Some(2)),
        ]));
        let s = SelectionStrategy::new(StrategyKind::SoftLabel);
        let mut pool_sizes = Vec::new();
        let out = run_self_training_observed(
            &backend(),
            &labeled(),
            &pool,
            &s,
            &TerminationRule::default(),
            RunOptions::default(),
            |st| pool_sizes.push((st.unlabeled.len(), st.soft_targets.len())),
        )
        .unwrap();
        assert_eq!(out.history.len(), DEFAULT_SOFT_MAX_ITERATIONS);
        assert_eq!(out.stop_reason, StopReason::MaxIterations);
        assert!(out.history.iter().all(|r| r.soft && r.num_selected == 3 && r.pool_size_after == 3));
        assert_eq!(pool_sizes[0], (3, 0));
        assert!(pool_sizes[1..].iter().all(|&s| s == (3, 3)));
        assert_eq!(out.history[0].pseudo_label_accuracy, Some(1.0));
    }

    #[test]
    fn evaluate_counts() {
        let sl = run_supervised(&backend(), &labeled(), RunOptions::default()).unwrap();
        let report = evaluate(&sl, &labeled()).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        assert_eq!(report.n, 3);
    }
}
