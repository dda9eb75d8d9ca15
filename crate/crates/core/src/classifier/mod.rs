//! Probabilistic text classifiers.
//!
//! The self-training engine talks to classifiers only through
//! [`ClassifierBackend`] and [`Classifier`]. The built-in backend is hashed
//! bag-of-words features feeding multinomial softmax regression trained with
//! SGD ([`softmax`]). Other backends (a transformer fine-tuner, for example;
//! the reference RoBERTa setup used learning rate 8e-6) plug in by
//! implementing the two traits.

pub mod features;
pub mod softmax;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{FeatureVector, Featurizer};
pub use softmax::{BagOfWordsBackend, Hyperparams, SoftmaxModel, TrainReport};

/// Tolerance on the sum of a probability vector.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DistError {
    #[error("probability vector is empty")]
    Empty,
    #[error("probability {0} is negative or not finite")]
    BadEntry(f64),
    #[error("probabilities sum to {0}, not 1")]
    BadSum(f64),
}

/// A probability distribution over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self, DistError> {
        if probs.is_empty() {
            return Err(DistError::Empty);
        }
        if let Some(&bad) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(DistError::BadEntry(bad));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(DistError::BadSum(sum));
        }
        Ok(Self(probs))
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn one_hot(num_classes: usize, class: usize) -> Self {
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Self(probs)
    }

    /// Numerically stable softmax.
    pub fn from_logits(logits: &[f64]) -> Self {
        Self(softmax::softmax(logits))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for ProbDist {
    type Error = DistError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        ProbDist::new(v)
    }
}

impl From<ProbDist> for Vec<f64> {
    fn from(d: ProbDist) -> Self {
        d.0
    }
}

/// Training signal for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTarget {
    Hard(usize),
    Soft(ProbDist),
}

impl TrainTarget {
    pub fn is_soft(&self) -> bool {
        matches!(self, TrainTarget::Soft(_))
    }
}

/// A text with its training target, as handed to a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub id: String,
    pub text: String,
    pub target: TrainTarget,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training examples")]
    Empty,
    #[error("example {index}: hard label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("example {index}: target has {got} classes, expected {expected}")]
    TargetDimension {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("example {index}: feature dimension {got}, model expects {expected}")]
    FeatureDimension {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-finite loss at epoch {epoch} (learning rate {learning_rate})")]
    NonFinite { epoch: usize, learning_rate: f64 },
    #[error("invalid hyper-parameter: {0}")]
    InvalidHyperparams(String),
    #[error("{0}")]
    Backend(String),
}

/// A trained model that maps text to a class distribution.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;

    fn predict_dist(&self, text: &str) -> ProbDist;

    fn predict_label(&self, text: &str) -> usize {
        self.predict_dist(text).argmax()
    }
}

/// Something that can train a fresh [`Classifier`] from records.
pub trait ClassifierBackend: Sync {
    type Model: Classifier;

    fn train(
        &self,
        num_classes: usize,
        records: &[TrainRecord],
        validation: Option<&[TrainRecord]>,
    ) -> Result<Self::Model, TrainError>;
}
