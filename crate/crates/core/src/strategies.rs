//! Instance-selection strategies.
//!
//! Every strategy sees a batch of [`Prediction`]s over the unlabeled pool and
//! returns the subset to pseudo-label. After the strategy's own filter, at
//! most `batch_cap` instances survive, keeping the highest-confidence ones.
//! Ties are always broken by ascending instance id, and results are returned
//! in ascending id order.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::ProbDist;
use crate::seed;

pub const DEFAULT_BATCH_CAP: usize = 1000;

/// Max entry of the distribution.
pub fn confidence(dist: &ProbDist) -> f64 {
    dist.probs().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Shannon entropy in nats with 0 ln 0 = 0. Terms are summed in descending
/// probability order so permuted distributions give identical values.
pub fn entropy(dist: &ProbDist) -> f64 {
    let mut p: Vec<f64> = dist.probs().iter().copied().filter(|&x| x > 0.0).collect();
    p.sort_by(|a, b| b.total_cmp(a));
    let h = -p.iter().map(|&x| x * x.ln()).sum::<f64>();
    h.max(0.0)
}

/// A model's output for one pool instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub dist: ProbDist,
    pub pseudo_label: usize,
    pub confidence: f64,
    pub entropy: f64,
}

impl Prediction {
    pub fn new(instance_id: impl Into<String>, dist: ProbDist) -> Self {
        let pseudo_label = dist.argmax();
        Self {
            instance_id: instance_id.into(),
            pseudo_label,
            confidence: dist.probs()[pseudo_label],
            entropy: entropy(&dist),
            dist,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum StrategyKind {
    /// Confidence strictly above `t`.
    ConfThreshold { t: f64 },
    /// Entropy strictly below `t`.
    EntThreshold { t: f64 },
    /// The `k` most confident.
    #[serde(rename = "max_conf")]
    MaxConfTopK { k: usize },
    /// The `k` lowest-entropy.
    #[serde(rename = "min_ent")]
    MinEntTopK { k: usize },
    /// Every prediction, trained on as a soft target.
    SoftLabel,
    /// `b` uniformly at random without replacement.
    #[serde(rename = "random")]
    RandomBatch { b: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStrategy {
    #[serde(flatten)]
    pub kind: StrategyKind,
    pub batch_cap: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("strategy {strategy} requires parameter `{param}`")]
    MissingParam { strategy: String, param: &'static str },
    #[error("strategy {strategy} does not take parameter `{param}`")]
    UnexpectedParam { strategy: String, param: &'static str },
    #[error("parameter out of range: {0}")]
    OutOfRange(String),
}

impl SelectionStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            batch_cap: DEFAULT_BATCH_CAP,
        }
    }

    pub fn with_batch_cap(mut self, batch_cap: usize) -> Self {
        self.batch_cap = batch_cap;
        self
    }

    pub fn is_soft(&self) -> bool {
        matches!(self.kind, StrategyKind::SoftLabel)
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            StrategyKind::ConfThreshold { .. } => "conf_threshold",
            StrategyKind::EntThreshold { .. } => "ent_threshold",
            StrategyKind::MaxConfTopK { .. } => "max_conf",
            StrategyKind::MinEntTopK { .. } => "min_ent",
            StrategyKind::SoftLabel => "soft_label",
            StrategyKind::RandomBatch { .. } => "random",
        }
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        let range = |m: String| Err(StrategyError::OutOfRange(m));
        if self.batch_cap == 0 {
            return range("batch_cap must be positive".into());
        }
        match self.kind {
            StrategyKind::ConfThreshold { t } if !(t > 0.0 && t <= 1.0) => {
                range(format!("confidence threshold {t} not in (0, 1]"))
            }
            StrategyKind::EntThreshold { t } if !(t >= 0.0 && t.is_finite()) => {
                range(format!("entropy threshold {t} must be >= 0"))
            }
            StrategyKind::MaxConfTopK { k: 0 } | StrategyKind::MinEntTopK { k: 0 } => {
                range("k must be positive".into())
            }
            StrategyKind::RandomBatch { b: 0 } => range("b must be positive".into()),
            _ => Ok(()),
        }
    }
}

/// Flat strategy block as written in experiment config files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub strategy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_cap: Option<usize>,
}

impl StrategyConfig {
    pub fn resolve(&self) -> Result<SelectionStrategy, StrategyError> {
        let name = self.strategy.as_str();
        let missing = |param| StrategyError::MissingParam {
            strategy: name.to_string(),
            param,
        };
        let (needs_t, needs_k, needs_b) = match name {
            "conf_threshold" | "ent_threshold" => (true, false, false),
            "max_conf" | "min_ent" => (false, true, false),
            "random" => (false, false, true),
            "soft_label" => (false, false, false),
            other => return Err(StrategyError::UnknownStrategy(other.to_string())),
        };
        for (given, needed, param) in [
            (self.t.is_some(), needs_t, "t"),
            (self.k.is_some(), needs_k, "k"),
            (self.b.is_some(), needs_b, "b"),
        ] {
            if given && !needed {
                return Err(StrategyError::UnexpectedParam {
                    strategy: name.to_string(),
                    param,
                });
            }
        }
        let kind = match name {
            "conf_threshold" => StrategyKind::ConfThreshold {
                t: self.t.ok_or_else(|| missing("t"))?,
            },
            "ent_threshold" => StrategyKind::EntThreshold {
                t: self.t.ok_or_else(|| missing("t"))?,
            },
            "max_conf" => StrategyKind::MaxConfTopK {
                k: self.k.ok_or_else(|| missing("k"))?,
            },
            "min_ent" => StrategyKind::MinEntTopK {
                k: self.k.ok_or_else(|| missing("k"))?,
            },
            "random" => StrategyKind::RandomBatch {
                b: self.b.ok_or_else(|| missing("b"))?,
            },
            _ => StrategyKind::SoftLabel,
        };
        let strategy = SelectionStrategy {
            kind,
            batch_cap: self.batch_cap.unwrap_or(DEFAULT_BATCH_CAP),
        };
        strategy.validate()?;
        Ok(strategy)
    }

    pub fn from_strategy(s: &SelectionStrategy) -> Self {
        let mut c = StrategyConfig {
            strategy: s.name().to_string(),
            batch_cap: Some(s.batch_cap),
            ..Default::default()
        };
        match s.kind {
            StrategyKind::ConfThreshold { t } | StrategyKind::EntThreshold { t } => c.t = Some(t),
            StrategyKind::MaxConfTopK { k } | StrategyKind::MinEntTopK { k } => c.k = Some(k),
            StrategyKind::RandomBatch { b } => c.b = Some(b),
            StrategyKind::SoftLabel => {}
        }
        c
    }
}

/// Chosen instances, sorted by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionResult {
    Hard(Vec<(String, usize)>),
    Soft(Vec<(String, ProbDist)>),
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        match self {
            SelectionResult::Hard(v) => v.len(),
            SelectionResult::Soft(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<&str> {
        match self {
            SelectionResult::Hard(v) => v.iter().map(|(id, _)| id.as_str()).collect(),
            SelectionResult::Soft(v) => v.iter().map(|(id, _)| id.as_str()).collect(),
        }
    }
}

fn by_confidence(a: &Prediction, b: &Prediction) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.instance_id.cmp(&b.instance_id))
}

fn by_entropy(a: &Prediction, b: &Prediction) -> Ordering {
    a.entropy
        .total_cmp(&b.entropy)
        .then_with(|| a.instance_id.cmp(&b.instance_id))
}

fn top<'a>(
    mut items: Vec<&'a Prediction>,
    n: usize,
    order: fn(&Prediction, &Prediction) -> Ordering,
) -> Vec<&'a Prediction> {
    items.sort_by(|a, b| order(a, b));
    items.truncate(n);
    items
}

/// Apply `strategy` to `predictions`. `rng_seed` drives [`StrategyKind::RandomBatch`]
/// only: candidates are sorted by id and `rand::seq::index::sample` picks
/// `min(b, n)` positions using ChaCha8 seeded with `rng_seed`.
pub fn select(
    strategy: &SelectionStrategy,
    predictions: &[Prediction],
    rng_seed: u64,
) -> SelectionResult {
    // First occurrence wins for repeated ids.
    let mut seen = HashSet::with_capacity(predictions.len());
    let pool: Vec<&Prediction> = predictions
        .iter()
        .filter(|p| seen.insert(p.instance_id.as_str()))
        .collect();

    let filtered: Vec<&Prediction> = match strategy.kind {
        StrategyKind::ConfThreshold { t } => pool.into_iter().filter(|p| p.confidence > t).collect(),
        StrategyKind::EntThreshold { t } => pool.into_iter().filter(|p| p.entropy < t).collect(),
        StrategyKind::MaxConfTopK { k } => top(pool, k, by_confidence),
        StrategyKind::MinEntTopK { k } => top(pool, k, by_entropy),
        StrategyKind::SoftLabel => pool,
        StrategyKind::RandomBatch { b } => {
            let mut sorted = pool;
            sorted.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
            let n = sorted.len();
            let mut rng = seed::rng(rng_seed);
            index::sample(&mut rng, n, b.min(n))
                .into_iter()
                .map(|i| sorted[i])
                .collect()
        }
    };

    let mut chosen = if filtered.len() > strategy.batch_cap {
        top(filtered, strategy.batch_cap, by_confidence)
    } else {
        filtered
    };
    chosen.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));

    if strategy.is_soft() {
        SelectionResult::Soft(
            chosen
                .into_iter()
                .map(|p| (p.instance_id.clone(), p.dist.clone()))
                .collect(),
        )
    } else {
        SelectionResult::Hard(
            chosen
                .into_iter()
                .map(|p| (p.instance_id.clone(), p.pseudo_label))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> ProbDist {
        ProbDist::new(p.to_vec()).unwrap()
    }

    /// Three-class prediction with the given confidence on class 0.
    fn pred(id: &str, conf: f64) -> Prediction {
        let rest = (1.0 - conf) / 2.0;
        Prediction::new(id, dist(&[conf, rest, 1.0 - conf - rest]))
    }

    #[test]
    fn confidence_values() {
        assert_eq!(confidence(&dist(&[0.7, 0.2, 0.1])), 0.7);
        assert!((confidence(&ProbDist::uniform(3)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(confidence(&ProbDist::one_hot(3, 0)), 1.0);
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&ProbDist::one_hot(3, 1)), 0.0);
        assert!((entropy(&ProbDist::uniform(3)) - 3f64.ln()).abs() < 1e-12);
        assert!((entropy(&dist(&[0.5, 0.5, 0.0])) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn conf_threshold_is_strict() {
        let preds = vec![pred("a", 0.95), pred("b", 0.91), pred("c", 0.89), pred("d", 0.9)];
        let s = SelectionStrategy::new(StrategyKind::ConfThreshold { t: 0.9 });
        assert_eq!(select(&s, &preds, 0).ids(), ["a", "b"]);
    }

    #[test]
    fn top_k_tie_goes_to_lower_id() {
        let preds = vec![pred("a", 0.5), pred("d", 0.9), pred("c", 0.7), pred("b", 0.9)];
        let two = SelectionStrategy::new(StrategyKind::MaxConfTopK { k: 2 });
        assert_eq!(select(&two, &preds, 0).ids(), ["b", "d"]);
        let one = SelectionStrategy::new(StrategyKind::MaxConfTopK { k: 1 });
        assert_eq!(select(&one, &preds, 0).ids(), ["b"]);
    }

    #[test]
    fn cap_keeps_most_confident() {
        let preds: Vec<_> = (0..10).map(|i| pred(&format!("p{i}"), 0.5 + i as f64 * 0.04)).collect();
        let s = SelectionStrategy::new(StrategyKind::ConfThreshold { t: 0.4 }).with_batch_cap(3);
        assert_eq!(select(&s, &preds, 0).ids(), ["p7", "p8", "p9"]);
        let soft = SelectionStrategy::new(StrategyKind::SoftLabel).with_batch_cap(2);
        match select(&soft, &preds, 0) {
            SelectionResult::Soft(v) => {
                assert_eq!(v.len(), 2);
                assert_eq!(v[1].0, "p9");
                assert_eq!(v[1].1, preds[9].dist);
            }
            other => panic!("expected soft result, got {other:?}"),
        }
    }

    #[test]
    fn oversized_k_selects_everything() {
        let preds = vec![pred("a", 0.5), pred("b", 0.6)];
        let s = SelectionStrategy::new(StrategyKind::MinEntTopK { k: 10 });
        assert_eq!(select(&s, &preds, 0).len(), 2);
        let r = SelectionStrategy::new(StrategyKind::RandomBatch { b: 10 });
        assert_eq!(select(&r, &preds, 3).len(), 2);
    }

    #[test]
    fn empty_batch() {
        let s = SelectionStrategy::new(StrategyKind::SoftLabel);
        assert!(select(&s, &[], 0).is_empty());
    }

    #[test]
    fn random_ignores_input_order() {
        let preds: Vec<_> = (0..50).map(|i| pred(&format!("p{i:02}"), 0.6)).collect();
        let mut reversed = preds.clone();
        reversed.reverse();
        let s = SelectionStrategy::new(StrategyKind::RandomBatch { b: 7 });
        assert_eq!(select(&s, &preds, 9), select(&s, &reversed, 9));
        assert_ne!(select(&s, &preds, 9), select(&s, &preds, 10));
    }

    #[test]
    fn config_resolution() {
        let c: StrategyConfig = toml::from_str("strategy = \"conf_threshold\"\nt = 0.9\n").unwrap();
        assert_eq!(
            c.resolve().unwrap(),
            SelectionStrategy::new(StrategyKind::ConfThreshold { t: 0.9 })
        );
        let missing = StrategyConfig {
            strategy: "max_conf".into(),
            ..Default::default()
        };
        assert!(matches!(missing.resolve(), Err(StrategyError::MissingParam { param: "k", .. })));
        let extra = StrategyConfig {
            strategy: "soft_label".into(),
            t: Some(0.5),
            ..Default::default()
        };
        assert!(matches!(extra.resolve(), Err(StrategyError::UnexpectedParam { .. })));
        let typo = StrategyConfig {
            strategy: "conf_treshold".into(),
            ..Default::default()
        };
        assert!(matches!(typo.resolve(), Err(StrategyError::UnknownStrategy(_))));
        assert!(toml::from_str::<StrategyConfig>("strategy = \"random\"\nbb = 3\n").is_err());
        let bad = StrategyConfig {
            strategy: "conf_threshold".into(),
            t: Some(1.5),
            ..Default::default()
        };
        assert!(matches!(bad.resolve(), Err(StrategyError::OutOfRange(_))));
    }

    fn arb_dist(c: usize) -> impl Strategy<Value = ProbDist> {
        prop::collection::vec(0.0f64..1.0, c).prop_map(move |raw| {
            let s: f64 = raw.iter().sum();
            if s <= 1e-12 {
                ProbDist::uniform(c)
            } else {
                let mut v: Vec<f64> = raw.iter().map(|x| x / s).collect();
                let drift: f64 = 1.0 - v.iter().sum::<f64>();
                v[0] = (v[0] + drift).max(0.0);
                ProbDist::new(v).unwrap()
            }
        })
    }

    fn arb_preds(c: usize) -> impl Strategy<Value = Vec<Prediction>> {
        prop::collection::vec(arb_dist(c), 0..60).prop_map(|ds| {
            ds.into_iter()
                .enumerate()
                .map(|(i, d)| Prediction::new(format!("id{i:03}"), d))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn threshold_monotonicity(preds in arb_preds(3), t1 in 0.01f64..1.0, t2 in 0.01f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let conf = |t| select(&SelectionStrategy::new(StrategyKind::ConfThreshold { t }), &preds, 0);
            let strict: HashSet<String> = conf(hi).ids().into_iter().map(String::from).collect();
            let loose: HashSet<String> = conf(lo).ids().into_iter().map(String::from).collect();
            prop_assert!(strict.is_subset(&loose));

            let (elo, ehi) = (lo * 3f64.ln(), hi * 3f64.ln());
            let ent = |t| select(&SelectionStrategy::new(StrategyKind::EntThreshold { t }), &preds, 0);
            let strict: HashSet<String> = ent(elo).ids().into_iter().map(String::from).collect();
            let loose: HashSet<String> = ent(ehi).ids().into_iter().map(String::from).collect();
            prop_assert!(strict.is_subset(&loose));
        }

        #[test]
        fn top_k_sizes(preds in arb_preds(3), k in 1usize..80, cap in 1usize..80) {
            for kind in [StrategyKind::MaxConfTopK { k }, StrategyKind::MinEntTopK { k }] {
                let s = SelectionStrategy::new(kind).with_batch_cap(cap);
                prop_assert_eq!(select(&s, &preds, 0).len(), k.min(preds.len()).min(cap));
            }
        }

        #[test]
        fn binary_conf_and_entropy_rankings_agree(preds in arb_preds(2), k in 1usize..60) {
            let a = select(&SelectionStrategy::new(StrategyKind::MaxConfTopK { k }), &preds, 0);
            let b = select(&SelectionStrategy::new(StrategyKind::MinEntTopK { k }), &preds, 0);
            prop_assert_eq!(a.ids(), b.ids());
        }

        #[test]
        fn output_ids_are_unique_members(preds in arb_preds(3), seed in any::<u64>(), b in 1usize..80) {
            let input: HashSet<&str> = preds.iter().map(|p| p.instance_id.as_str()).collect();
            for kind in [
                StrategyKind::ConfThreshold { t: 0.5 },
                StrategyKind::EntThreshold { t: 0.8 },
                StrategyKind::MaxConfTopK { k: b },
                StrategyKind::MinEntTopK { k: b },
                StrategyKind::SoftLabel,
                StrategyKind::RandomBatch { b },
            ] {
                let s = SelectionStrategy::new(kind).with_batch_cap(25);
                let r = select(&s, &preds, seed);
                let ids = r.ids();
                let unique: HashSet<&str> = ids.iter().copied().collect();
                prop_assert_eq!(unique.len(), ids.len());
                prop_assert!(unique.is_subset(&input));
                prop_assert_eq!(r, select(&s, &preds, seed));
            }
        }
    }
}
