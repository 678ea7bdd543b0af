//! Task kinds and performance metrics. Every metric is "higher is better";
//! reconstruction error is reported negated.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Reconstruction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Accuracy,
    MacroF1,
    NegMse,
}

macro_rules! string_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($variant => $name),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::validation(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
    };
}

string_enum!(TaskKind, "task kind", TaskKind::Classification => "classification", TaskKind::Reconstruction => "reconstruction");
string_enum!(MetricName, "metric", MetricName::Accuracy => "accuracy", MetricName::MacroF1 => "macro_f1", MetricName::NegMse => "neg_mse");

impl MetricName {
    pub fn supports(self, kind: TaskKind) -> bool {
        matches!(
            (self, kind),
            (MetricName::Accuracy | MetricName::MacroF1, TaskKind::Classification)
                | (MetricName::NegMse, TaskKind::Reconstruction)
        )
    }

    pub fn check(self, kind: TaskKind) -> Result<()> {
        if self.supports(kind) {
            Ok(())
        } else {
            Err(Error::validation(format!("metric {self} is not defined for {kind} tasks")))
        }
    }

    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Classification => MetricName::Accuracy,
            TaskKind::Reconstruction => MetricName::NegMse,
        }
    }
}

fn check_pairs(truth: &[usize], pred: &[usize]) -> Result<()> {
    if truth.is_empty() {
        return Err(Error::validation("cannot score an empty evaluation set"));
    }
    if truth.len() != pred.len() {
        return Err(Error::validation(format!("{} labels vs {} predictions", truth.len(), pred.len())));
    }
    Ok(())
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_pairs(truth, pred)?;
    let hits = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Unweighted mean of per-class F1 over every class seen in either labels or
/// predictions. A class with zero precision and recall scores 0.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_pairs(truth, pred)?;
    let classes: BTreeSet<usize> = truth.iter().chain(pred).copied().collect();
    let mut total = 0.0;
    for &c in &classes {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fneg = 0.0;
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fneg += 1.0,
                _ => {}
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(total / classes.len() as f64)
}

pub fn neg_mse(prediction: &[f32], target: &[f32]) -> Result<f64> {
    if prediction.is_empty() || prediction.len() != target.len() {
        return Err(Error::validation(format!(
            "reconstruction sizes differ or are empty: {} vs {}",
            prediction.len(),
            target.len()
        )));
    }
    let sum: f64 = prediction
        .iter()
        .zip(target)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(-sum / prediction.len() as f64)
}

/// Scores class predictions under a classification metric.
pub fn score_labels(metric: MetricName, truth: &[usize], pred: &[usize]) -> Result<f64> {
    match metric {
        MetricName::Accuracy => accuracy(truth, pred),
        MetricName::MacroF1 => macro_f1(truth, pred),
        MetricName::NegMse => Err(Error::validation("neg_mse scores reconstructions, not labels")),
    }
}
