//! Classification metrics: confusion matrices, per-class P/R/F1, macro-F1,
//! pseudo-label accuracy and multi-seed aggregation.
//!
//! Zero-division convention: a precision, recall or F1 with an empty
//! denominator is 0, and the report carries a flag naming the class.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::data::ShadowLabels;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("gold has {gold} labels but predictions have {predicted}")]
    LengthMismatch { gold: usize, predicted: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("no shadow gold label for instance {0:?}")]
    MissingShadowLabel(String),
    #[error("nothing to evaluate")]
    Empty,
}

/// Rows are gold classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        assert!(counts.iter().all(|r| r.len() == counts.len()), "matrix must be square");
        Self { counts }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, gold: usize, predicted: usize) -> u64 {
        self.counts[gold][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.counts[c][c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }

    pub fn gold_count(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted_count(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }

    /// Relabel classes: class `c` becomes `perm[c]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.num_classes();
        let mut counts = vec![vec![0; n]; n];
        for (g, row) in self.counts.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                counts[perm[g]][perm[p]] = v;
            }
        }
        Self { counts }
    }

    pub fn class_scores(&self, class: usize) -> ClassScores {
        let tp = self.counts[class][class];
        let support = self.gold_count(class);
        let predicted = self.predicted_count(class);
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassScores {
            name: String::new(),
            precision,
            recall,
            f1,
            support,
        }
    }

    /// Micro-averaged F1; equals accuracy for single-label classification.
    pub fn micro_f1(&self) -> f64 {
        self.accuracy()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(
    gold: &[usize],
    predicted: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if gold.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            predicted: predicted.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(num_classes);
    for (&g, &p) in gold.iter().zip(predicted) {
        for label in [g, p] {
            if label >= num_classes {
                return Err(MetricsError::LabelOutOfRange { label, num_classes });
            }
        }
        cm.counts[g][p] += 1;
    }
    Ok(cm)
}

/// Unweighted mean of per-class F1 (absent classes count as 0).
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let n = cm.num_classes();
    if n == 0 {
        return 0.0;
    }
    (0..n).map(|c| cm.class_scores(c).f1).sum::<f64>() / n as f64
}

/// Fraction of `(id, label)` pseudo-labels that match the shadow gold label.
pub fn labeling_accuracy(
    records: &[(String, usize)],
    shadow: &ShadowLabels,
) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut correct = 0usize;
    for (id, label) in records {
        let gold = shadow
            .get(id)
            .ok_or_else(|| MetricsError::MissingShadowLabel(id.clone()))?;
        if gold == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// The `metrics.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub per_class: Vec<ClassScores>,
    pub n: u64,
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeling_accuracy: Option<f64>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix, class_names: &[String]) -> Self {
        let mut flags = Vec::new();
        let per_class: Vec<ClassScores> = (0..cm.num_classes())
            .map(|c| {
                let name = class_names
                    .get(c)
                    .cloned()
                    .unwrap_or_else(|| format!("class{c}"));
                if cm.predicted_count(c) == 0 {
                    flags.push(format!("zero_division:precision:{name}"));
                }
                if cm.gold_count(c) == 0 {
                    flags.push(format!("zero_division:recall:{name}"));
                }
                ClassScores {
                    name,
                    ..cm.class_scores(c)
                }
            })
            .collect();
        if cm.total() == 0 {
            flags.push("empty_evaluation".to_string());
        }
        Self {
            accuracy: cm.accuracy(),
            macro_f1: macro_f1(&cm),
            micro_f1: cm.micro_f1(),
            per_class,
            n: cm.total(),
            flags,
            labeling_accuracy: None,
            confusion: cm,
        }
    }

    pub fn compute(
        gold: &[usize],
        predicted: &[usize],
        class_names: &[String],
    ) -> Result<Self, MetricsError> {
        Ok(Self::from_confusion(
            confusion(gold, predicted, class_names.len())?,
            class_names,
        ))
    }
}

/// Mean with a two-sided 95% Student-t confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std_dev: f64,
    /// Half width of the 95% interval; absent for fewer than two values.
    pub ci95: Option<f64>,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some(Summary {
            n,
            mean,
            std_dev: 0.0,
            ci95: None,
        });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std_dev = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("degrees of freedom positive")
        .inverse_cdf(0.975);
    Some(Summary {
        n,
        mean,
        std_dev,
        ci95: Some(t * std_dev / (n as f64).sqrt()),
    })
}
