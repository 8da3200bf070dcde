//! Multi-class precision / recall / F1 and their averages.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("label {label} at index {index} is outside 0..{classes}")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("{truths} true labels but {preds} predictions")]
    LengthMismatch { truths: usize, preds: usize },
}

/// K×K counts, rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), classes * classes);
        Self { classes, counts }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// True-class support `n_k`.
    pub fn support(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }
}

pub fn confusion(truths: &[usize], preds: &[usize], classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    if truths.len() != preds.len() {
        return Err(MetricsError::LengthMismatch {
            truths: truths.len(),
            preds: preds.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (index, (&t, &p)) in truths.iter().zip(preds).enumerate() {
        for label in [t, p] {
            if label >= classes {
                return Err(MetricsError::LabelOutOfRange { index, label, classes });
            }
        }
        cm.counts[t * classes + p] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Per-class scores; every 0/0 is reported as 0.
pub fn per_class_prf(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    (0..cm.classes)
        .map(|k| {
            let tp = cm.get(k, k) as f64;
            let predicted: u64 = (0..cm.classes).map(|t| cm.get(t, k)).sum();
            let support = cm.support(k);
            let precision = ratio(tp, predicted as f64);
            let recall = ratio(tp, support as f64);
            let f1 = ratio(2.0 * precision * recall, precision + recall);
            ClassScores {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect()
}

/// Σ_k (n_k / N) F1_k.
pub fn weighted_f1(cm: &ConfusionMatrix) -> f64 {
    support_weighted(&per_class_prf(cm), |s| s.f1)
}

/// Plain mean of F1_k over all K classes.
pub fn unweighted_macro_f1(cm: &ConfusionMatrix) -> f64 {
    unweighted(&per_class_prf(cm), |s| s.f1)
}

/// Support-weighted mean of one score over classes.
pub fn support_weighted(scores: &[ClassScores], f: impl Fn(&ClassScores) -> f64) -> f64 {
    let total: u64 = scores.iter().map(|s| s.support).sum();
    if total == 0 {
        return 0.0;
    }
    scores.iter().map(|s| s.support as f64 / total as f64 * f(s)).sum()
}

/// Unweighted mean of one score over classes.
pub fn unweighted(scores: &[ClassScores], f: impl Fn(&ClassScores) -> f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(f).sum::<f64>() / scores.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    #[serde(flatten)]
    pub scores: ClassScores,
}

/// Per-class table plus support-weighted and unweighted aggregate rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassRow>,
    pub weighted: Aggregate,
    pub unweighted: Aggregate,
    pub samples: u64,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, names: &[String]) -> Self {
        let scores = per_class_prf(cm);
        let classes = scores
            .iter()
            .enumerate()
            .map(|(k, s)| ClassRow {
                class: names.get(k).cloned().unwrap_or_else(|| k.to_string()),
                scores: *s,
            })
            .collect();
        Self {
            classes,
            weighted: Aggregate {
                precision: support_weighted(&scores, |s| s.precision),
                recall: support_weighted(&scores, |s| s.recall),
                f1: support_weighted(&scores, |s| s.f1),
            },
            unweighted: Aggregate {
                precision: unweighted(&scores, |s| s.precision),
                recall: unweighted(&scores, |s| s.recall),
                f1: unweighted(&scores, |s| s.f1),
            },
            samples: cm.total(),
            confusion: cm.rows(),
        }
    }

    pub fn to_text(&self) -> String {
        let width = self.classes.iter().map(|r| r.class.len()).max().unwrap_or(0).max(22);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  precision  recall  f1-score  support", "class");
        for r in &self.classes {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9.4}  {:>6.4}  {:>8.4}  {:>7}",
                r.class, r.scores.precision, r.scores.recall, r.scores.f1, r.scores.support
            );
        }
        for (name, a) in [("macro avg (weighted)", &self.weighted), ("macro avg (unweighted)", &self.unweighted)] {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9.4}  {:>6.4}  {:>8.4}  {:>7}",
                name, a.precision, a.recall, a.f1, self.samples
            );
        }
        s
    }
}
