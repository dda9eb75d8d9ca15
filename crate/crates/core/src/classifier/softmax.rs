//! Multinomial softmax regression over hashed features.
//!
//! Objective: mean per-example loss + (l2 / 2) * ||W||^2 (bias unpenalized).
//! Hard target y: -ln p_y. Soft target q: KL(q || p) = sum_c q_c ln(q_c / p_c).
//! Both have logit gradient p - target, so one SGD step serves both.
//!
//! SGD visits examples in a per-epoch shuffled order drawn from the seed, with
//! step size `learning_rate / sqrt(epoch)`. L2 decay is applied lazily through
//! a global scale factor so each step only touches the example's features.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::features::{FeatureVector, Featurizer, HASH_VERSION};
use super::{Classifier, ClassifierBackend, ProbDist, TrainError, TrainRecord, TrainTarget};
use crate::seed;

/// Largest learning rate for which the per-epoch training loss is known to
/// decrease monotonically on separable bag-of-words data (texts of up to ~15
/// tokens). It is also the default.
pub const STABLE_LEARNING_RATE: f64 = 0.1;

pub const ARTIFACT_FORMAT: &str = "selftrain-softmax";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
    /// Stop after this many epochs without validation-loss improvement and
    /// keep the best epoch. Only used when a validation set is supplied.
    pub patience: Option<usize>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: STABLE_LEARNING_RATE,
            epochs: 100,
            l2: 1e-4,
            seed: 0,
            patience: Some(2),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidHyperparams(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2 must be non-negative");
        }
        if self.patience == Some(0) {
            return bad("patience must be positive");
        }
        Ok(())
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Loss of one example given its logits.
pub fn example_loss(logits: &[f64], target: &TrainTarget) -> f64 {
    let log_p = log_softmax(logits);
    match target {
        TrainTarget::Hard(y) => -log_p[*y],
        TrainTarget::Soft(q) => q
            .probs()
            .iter()
            .zip(&log_p)
            .filter(|(&qc, _)| qc > 0.0)
            .map(|(&qc, &lp)| qc * (qc.ln() - lp))
            .sum(),
    }
}

/// d loss / d logits = p - target.
pub fn logit_gradient(probs: &[f64], target: &TrainTarget) -> Vec<f64> {
    let mut g = probs.to_vec();
    match target {
        TrainTarget::Hard(y) => g[*y] -= 1.0,
        TrainTarget::Soft(q) => g.iter_mut().zip(q.probs()).for_each(|(gc, qc)| *gc -= qc),
    }
    g
}

/// Softmax regression parameters: `weights` is row-major `num_classes x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel {
    num_classes: usize,
    featurizer: Featurizer,
    weights: Vec<f64>,
    bias: Vec<f64>,
    hyperparams: Hyperparams,
}

/// Dense gradient of the full objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SoftmaxModel {
    pub fn zeros(num_classes: usize, featurizer: Featurizer, hyperparams: Hyperparams) -> Self {
        Self {
            num_classes,
            featurizer,
            weights: vec![0.0; num_classes * featurizer.dim],
            bias: vec![0.0; num_classes],
            hyperparams,
        }
    }

    pub fn from_parts(
        num_classes: usize,
        featurizer: Featurizer,
        weights: Vec<f64>,
        bias: Vec<f64>,
        hyperparams: Hyperparams,
    ) -> Self {
        assert_eq!(weights.len(), num_classes * featurizer.dim);
        assert_eq!(bias.len(), num_classes);
        Self {
            num_classes,
            featurizer,
            weights,
            bias,
            hyperparams,
        }
    }

    pub fn dim(&self) -> usize {
        self.featurizer.dim
    }

    pub fn featurizer(&self) -> Featurizer {
        self.featurizer
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyperparams
    }

    pub fn logits(&self, x: &FeatureVector) -> Vec<f64> {
        let dim = self.dim();
        (0..self.num_classes)
            .map(|c| {
                let row = &self.weights[c * dim..(c + 1) * dim];
                self.bias[c]
                    + x.entries()
                        .iter()
                        .map(|&(j, w)| row[j as usize] * w)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn predict_dist_features(&self, x: &FeatureVector) -> ProbDist {
        ProbDist::from_logits(&self.logits(x))
    }

    pub fn predict_label_features(&self, x: &FeatureVector) -> usize {
        self.predict_dist_features(x).argmax()
    }

    fn l2_penalty(&self, l2: f64) -> f64 {
        0.5 * l2 * self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Mean example loss plus the L2 penalty.
    pub fn objective(&self, examples: &[(FeatureVector, TrainTarget)], l2: f64) -> f64 {
        mean_loss(self, examples) + self.l2_penalty(l2)
    }

    /// Analytic gradient of [`SoftmaxModel::objective`].
    pub fn gradient(&self, examples: &[(FeatureVector, TrainTarget)], l2: f64) -> Gradient {
        let dim = self.dim();
        let n = examples.len() as f64;
        let mut gw: Vec<f64> = self.weights.iter().map(|w| l2 * w).collect();
        let mut gb = vec![0.0; self.num_classes];
        for (x, target) in examples {
            let g = logit_gradient(self.predict_dist_features(x).probs(), target);
            for (c, gc) in g.iter().enumerate() {
                gb[c] += gc / n;
                for &(j, w) in x.entries() {
                    gw[c * dim + j as usize] += gc * w / n;
                }
            }
        }
        Gradient {
            weights: gw,
            bias: gb,
        }
    }

    pub fn to_artifact(&self) -> ModelArtifact {
        let dim = self.dim();
        ModelArtifact {
            format: ARTIFACT_FORMAT.to_string(),
            format_version: ARTIFACT_VERSION,
            hash_version: HASH_VERSION,
            num_classes: self.num_classes,
            dim,
            bias: self.bias.clone(),
            weights: (0..self.num_classes)
                .map(|c| {
                    self.weights[c * dim..(c + 1) * dim]
                        .iter()
                        .enumerate()
                        .filter(|(_, &w)| w != 0.0)
                        .map(|(j, &w)| (j as u32, w))
                        .collect()
                })
                .collect(),
            hyperparams: self.hyperparams.clone(),
        }
    }

    pub fn from_artifact(a: ModelArtifact) -> Result<Self, ModelIoError> {
        if a.format != ARTIFACT_FORMAT || a.format_version != ARTIFACT_VERSION {
            return Err(ModelIoError::Version(format!(
                "{} v{} (expected {ARTIFACT_FORMAT} v{ARTIFACT_VERSION})",
                a.format, a.format_version
            )));
        }
        if a.hash_version != HASH_VERSION {
            return Err(ModelIoError::Version(format!(
                "feature hash v{} (this build uses v{HASH_VERSION})",
                a.hash_version
            )));
        }
        if a.bias.len() != a.num_classes || a.weights.len() != a.num_classes || a.dim == 0 {
            return Err(ModelIoError::Invalid("shape mismatch".into()));
        }
        let mut weights = vec![0.0; a.num_classes * a.dim];
        for (c, row) in a.weights.iter().enumerate() {
            for &(j, w) in row {
                if j as usize >= a.dim || !w.is_finite() {
                    return Err(ModelIoError::Invalid(format!("bad weight entry ({c}, {j})")));
                }
                weights[c * a.dim + j as usize] = w;
            }
        }
        if a.bias.iter().any(|b| !b.is_finite()) {
            return Err(ModelIoError::Invalid("non-finite bias".into()));
        }
        Ok(Self {
            num_classes: a.num_classes,
            featurizer: Featurizer::new(a.dim),
            weights,
            bias: a.bias,
            hyperparams: a.hyperparams,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_artifact()).expect("artifact serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelIoError> {
        Self::from_artifact(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelIoError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelIoError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

impl Classifier for SoftmaxModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict_dist(&self, text: &str) -> ProbDist {
        self.predict_dist_features(&self.featurizer.featurize(text))
    }
}

fn mean_loss(model: &SoftmaxModel, examples: &[(FeatureVector, TrainTarget)]) -> f64 {
    let total: f64 = examples
        .iter()
        .map(|(x, t)| example_loss(&model.logits(x), t))
        .sum();
    total / examples.len() as f64
}

/// On-disk model format. Weights are stored sparsely, row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub format_version: u32,
    pub hash_version: u32,
    pub num_classes: usize,
    pub dim: usize,
    pub bias: Vec<f64>,
    pub weights: Vec<Vec<(u32, f64)>>,
    pub hyperparams: Hyperparams,
}

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("model file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("incompatible model artifact: {0}")]
    Version(String),
    #[error("invalid model artifact: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Objective (mean loss + L2) after each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

fn check_examples(
    examples: &[(FeatureVector, TrainTarget)],
    num_classes: usize,
    dim: usize,
) -> Result<(), TrainError> {
    for (index, (x, t)) in examples.iter().enumerate() {
        if x.dim() != dim {
            return Err(TrainError::FeatureDimension {
                index,
                got: x.dim(),
                expected: dim,
            });
        }
        match t {
            TrainTarget::Hard(label) if *label >= num_classes => {
                return Err(TrainError::LabelOutOfRange {
                    index,
                    label: *label,
                    num_classes,
                })
            }
            TrainTarget::Soft(q) if q.num_classes() != num_classes => {
                return Err(TrainError::TargetDimension {
                    index,
                    got: q.num_classes(),
                    expected: num_classes,
                })
            }
            _ => {}
        }
    }
    Ok(())
}

/// Train from zero initialization. See the module docs for the procedure.
pub fn train(
    examples: &[(FeatureVector, TrainTarget)],
    num_classes: usize,
    featurizer: Featurizer,
    hyperparams: &Hyperparams,
) -> Result<SoftmaxModel, TrainError> {
    train_with_report(examples, num_classes, featurizer, hyperparams, None).map(|(m, _)| m)
}

pub fn train_with_report(
    examples: &[(FeatureVector, TrainTarget)],
    num_classes: usize,
    featurizer: Featurizer,
    hyperparams: &Hyperparams,
    validation: Option<&[(FeatureVector, TrainTarget)]>,
) -> Result<(SoftmaxModel, TrainReport), TrainError> {
    hyperparams.validate()?;
    if examples.is_empty() {
        return Err(TrainError::Empty);
    }
    if num_classes == 0 {
        return Err(TrainError::InvalidHyperparams("no classes".into()));
    }
    let dim = featurizer.dim;
    check_examples(examples, num_classes, dim)?;
    let validation = validation.filter(|v| !v.is_empty());
    if let Some(v) = validation {
        check_examples(v, num_classes, dim)?;
    }

    // Columns that can ever become non-zero.
    let mut touched: Vec<u32> = examples
        .iter()
        .flat_map(|(x, _)| x.entries().iter().map(|&(j, _)| j))
        .collect();
    touched.sort_unstable();
    touched.dedup();

    let mut model = SoftmaxModel::zeros(num_classes, featurizer, hyperparams.clone());
    let mut report = TrainReport::default();
    let mut rng = seed::rng(hyperparams.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let l2 = hyperparams.l2;

    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut stale = 0usize;

    for epoch in 1..=hyperparams.epochs {
        let lr = hyperparams.learning_rate / (epoch as f64).sqrt();
        order.shuffle(&mut rng);
        let decay = 1.0 - lr * l2;
        if decay <= 0.0 {
            return Err(TrainError::InvalidHyperparams(
                "learning_rate * l2 must be below 1".into(),
            ));
        }
        // W = scale * stored weights during the epoch.
        let mut scale = 1.0f64;
        for &i in &order {
            let (x, target) = &examples[i];
            let mut logits = model.bias.clone();
            for (c, z) in logits.iter_mut().enumerate() {
                let row = &model.weights[c * dim..];
                *z += scale * x.entries().iter().map(|&(j, w)| row[j as usize] * w).sum::<f64>();
            }
            let g = logit_gradient(&softmax(&logits), target);
            scale *= decay;
            for (c, gc) in g.iter().enumerate() {
                let step = lr * gc / scale;
                let row = &mut model.weights[c * dim..];
                for &(j, w) in x.entries() {
                    row[j as usize] -= step * w;
                }
                model.bias[c] -= lr * gc;
            }
            if scale < 1e-100 {
                fold_scale(&mut model.weights, &touched, dim, num_classes, scale);
                scale = 1.0;
            }
        }
        fold_scale(&mut model.weights, &touched, dim, num_classes, scale);

        let data_loss = mean_loss(&model, examples);
        let penalty = 0.5
            * l2
            * (0..num_classes)
                .map(|c| {
                    touched
                        .iter()
                        .map(|&j| model.weights[c * dim + j as usize].powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>();
        let loss = data_loss + penalty;
        if !loss.is_finite()
            || model.bias.iter().any(|b| !b.is_finite())
        {
            return Err(TrainError::NonFinite {
                epoch,
                learning_rate: lr,
            });
        }
        report.epoch_losses.push(loss);
        report.best_epoch = epoch;

        if let (Some(val), Some(patience)) = (validation, hyperparams.patience) {
            let val_loss = mean_loss(&model, val);
            report.validation_losses.push(val_loss);
            let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
            if improved {
                best = Some((val_loss, snapshot(&model, &touched), model.bias.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }

    if let Some((_, weights, bias)) = best {
        restore(&mut model, &touched, &weights);
        model.bias = bias;
        let best_val = report
            .validation_losses
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        report.best_epoch = best_val.0 + 1;
    }
    Ok((model, report))
}

fn fold_scale(weights: &mut [f64], touched: &[u32], dim: usize, num_classes: usize, scale: f64) {
    if scale == 1.0 {
        return;
    }
    for c in 0..num_classes {
        for &j in touched {
            weights[c * dim + j as usize] *= scale;
        }
    }
}

fn snapshot(model: &SoftmaxModel, touched: &[u32]) -> Vec<f64> {
    let dim = model.dim();
    (0..model.num_classes)
        .flat_map(|c| touched.iter().map(move |&j| c * dim + j as usize))
        .map(|k| model.weights[k])
        .collect()
}

fn restore(model: &mut SoftmaxModel, touched: &[u32], values: &[f64]) {
    let dim = model.dim();
    let mut it = values.iter();
    for c in 0..model.num_classes {
        for &j in touched {
            model.weights[c * dim + j as usize] = *it.next().expect("snapshot size");
        }
    }
}

/// The built-in backend: hashed bag-of-words + softmax regression.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BagOfWordsBackend {
    pub featurizer: Featurizer,
    pub hyperparams: Hyperparams,
}

impl BagOfWordsBackend {
    pub fn new(featurizer: Featurizer, hyperparams: Hyperparams) -> Self {
        Self {
            featurizer,
            hyperparams,
        }
    }

    fn featurize_records(&self, records: &[TrainRecord]) -> Vec<(FeatureVector, TrainTarget)> {
        records
            .iter()
            .map(|r| (self.featurizer.featurize(&r.text), r.target.clone()))
            .collect()
    }
}

impl ClassifierBackend for BagOfWordsBackend {
    type Model = SoftmaxModel;

    fn train(
        &self,
        num_classes: usize,
        records: &[TrainRecord],
        validation: Option<&[TrainRecord]>,
    ) -> Result<SoftmaxModel, TrainError> {
        let examples = self.featurize_records(records);
        let val = validation.map(|v| self.featurize_records(v));
        train_with_report(
            &examples,
            num_classes,
            self.featurizer,
            &self.hyperparams,
            val.as_deref(),
        )
        .map(|(m, _)| m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp() -> Hyperparams {
        Hyperparams {
            patience: None,
            ..Hyperparams::default()
        }
    }

    /// Two classes with disjoint vocabularies, 20 examples each.
    pub(crate) fn separable_fixture(f: &Featurizer) -> Vec<(FeatureVector, TrainTarget)> {
        let a = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"];
        let b = ["one", "two", "three", "four", "five", "six"];
        let mut out = Vec::new();
        for i in 0..20 {
            let ta = format!("{} {} {}", a[i % 6], a[(i + 1) % 6], a[(i * 5 + 2) % 6]);
            let tb = format!("{} {} {}", b[i % 6], b[(i + 2) % 6], b[(i * 7 + 3) % 6]);
            out.push((f.featurize(&ta), TrainTarget::Hard(0)));
            out.push((f.featurize(&tb), TrainTarget::Hard(1)));
        }
        out
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = SoftmaxModel::zeros(3, Featurizer::new(16), hp());
        let d = m.predict_dist("anything at all");
        for p in d.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_softmax() {
        let p = softmax(&[2f64.ln(), 0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
        assert!((p[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1000.0, 999.0, -1000.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separable_fixture_reaches_full_accuracy() {
        let f = Featurizer::default();
        let data = separable_fixture(&f);
        let hp = Hyperparams {
            epochs: 50,
            ..hp()
        };
        let m = train(&data, 2, f, &hp).unwrap();
        let correct = data
            .iter()
            .filter(|(x, t)| TrainTarget::Hard(m.predict_label_features(x)) == *t)
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn one_hot_soft_target_matches_hard_path() {
        let f = Featurizer::new(32);
        let mut m = SoftmaxModel::zeros(3, f, hp());
        for (i, w) in m.weights_mut().iter_mut().enumerate() {
            *w = ((i * 37 % 11) as f64 - 5.0) / 10.0;
        }
        let x = f.featurize("some words here");
        let hard = vec![(x.clone(), TrainTarget::Hard(2))];
        let soft = vec![(x, TrainTarget::Soft(ProbDist::one_hot(3, 2)))];
        assert!((m.objective(&hard, 0.01) - m.objective(&soft, 0.01)).abs() < 1e-12);
        let (gh, gs) = (m.gradient(&hard, 0.01), m.gradient(&soft, 0.01));
        for (a, b) in gh.weights.iter().zip(&gs.weights).chain(gh.bias.iter().zip(&gs.bias)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn self_target_has_zero_gradient() {
        let f = Featurizer::new(32);
        let mut m = SoftmaxModel::zeros(3, f, hp());
        m.bias_mut().copy_from_slice(&[0.3, -0.2, 0.1]);
        for (i, w) in m.weights_mut().iter_mut().enumerate() {
            *w = ((i * 13 % 7) as f64 - 3.0) / 5.0;
        }
        let x = f.featurize("quiet steady market");
        let p = m.predict_dist_features(&x);
        let g = m.gradient(&[(x, TrainTarget::Soft(p))], 0.0);
        assert!(g.weights.iter().chain(&g.bias).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let f = Featurizer::default();
        let data = separable_fixture(&f);
        let a = train(&data, 2, f, &hp()).unwrap();
        let b = train(&data, 2, f, &hp()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn loss_is_monotone_at_stable_rate() {
        let f = Featurizer::default();
        let data = separable_fixture(&f);
        for lr in [STABLE_LEARNING_RATE, STABLE_LEARNING_RATE / 2.0, 0.01] {
            let hp = Hyperparams {
                learning_rate: lr,
                ..hp()
            };
            let (_, report) = train_with_report(&data, 2, f, &hp, None).unwrap();
            for w in report.epoch_losses.windows(2) {
                assert!(w[1] <= w[0], "loss rose from {} to {} at lr {lr}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let f = Featurizer::default();
        let data = separable_fixture(&f);
        // Validation labels are flipped, so validation loss rises from the start.
        let val: Vec<_> = data
            .iter()
            .take(6)
            .map(|(x, t)| {
                let flipped = match t {
                    TrainTarget::Hard(y) => TrainTarget::Hard(1 - y),
                    other => other.clone(),
                };
                (x.clone(), flipped)
            })
            .collect();
        let hp = Hyperparams::default();
        let (_, report) = train_with_report(&data, 2, f, &hp, Some(&val)).unwrap();
        assert_eq!(report.best_epoch, 1);
        assert_eq!(report.epoch_losses.len(), 3);
    }

    #[test]
    fn divergence_is_reported() {
        let f = Featurizer::new(64);
        let text = (0..200).map(|i| format!("w{}", i % 3)).collect::<Vec<_>>().join(" ");
        let data = vec![
            (f.featurize(&text), TrainTarget::Hard(0)),
            (f.featurize(&text), TrainTarget::Hard(1)),
        ];
        let hp = Hyperparams {
            learning_rate: 1e300,
            l2: 0.0,
            ..hp()
        };
        assert!(matches!(train(&data, 2, f, &hp), Err(TrainError::NonFinite { .. })));
    }

    #[test]
    fn rejects_bad_examples() {
        let f = Featurizer::new(16);
        assert!(matches!(train(&[], 3, f, &hp()), Err(TrainError::Empty)));
        let x = f.featurize("a b");
        assert!(matches!(
            train(&[(x.clone(), TrainTarget::Hard(3))], 3, f, &hp()),
            Err(TrainError::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            train(&[(x, TrainTarget::Soft(ProbDist::uniform(2)))], 3, f, &hp()),
            Err(TrainError::TargetDimension { .. })
        ));
    }

    #[test]
    fn artifact_round_trip_and_version_check() {
        let f = Featurizer::new(1024);
        let data = separable_fixture(&f);
        let m = train(&data, 2, f, &hp()).unwrap();
        let json = m.to_json();
        assert_eq!(SoftmaxModel::from_json(&json).unwrap(), m);

        let mut art = m.to_artifact();
        art.hash_version += 1;
        let bumped = serde_json::to_string(&art).unwrap();
        assert!(matches!(SoftmaxModel::from_json(&bumped), Err(ModelIoError::Version(_))));
    }
}
