use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, MetricName};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Absolute metric drop below the baseline that raises an alert.
    pub metric_drop: f64,
    pub z_threshold: f64,
    pub epsilon: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { metric_drop: 0.05, z_threshold: 3.0, epsilon: 1e-8 }
    }
}

/// Frozen at deployment time from the task's evaluation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub mean: Vec<f64>,
    /// Population standard deviation per latent dimension.
    pub std: Vec<f64>,
    /// `A_base`: the deployed model's metric on the split.
    pub baseline: f64,
    pub split: String,
    pub count: usize,
    pub embedder_version: String,
}

impl Reference {
    pub fn from_vectors(vectors: &[Vec<f32>], baseline: f64, split: &str, embedder_version: &str) -> Result<Self> {
        let n = vectors.len();
        let dim = vectors.first().map(Vec::len).ok_or_else(|| Error::validation("empty reference split"))?;
        let mut mean = vec![0.0f64; dim];
        for v in vectors {
            for (m, &x) in mean.iter_mut().zip(v) {
                *m += x as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0f64; dim];
        for v in vectors {
            for ((s, &x), m) in var.iter_mut().zip(v).zip(&mean) {
                *s += (x as f64 - m).powi(2);
            }
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(Reference { mean, std, baseline, split: split.to_string(), count: n, embedder_version: embedder_version.to_string() })
    }
}

/// What a feedback sample contributes to the windowed metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Outcome {
    Label { truth: usize, predicted: usize },
    /// Per-image negative reconstruction error.
    Score { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub seq: u64,
    pub image_id: String,
    pub fingerprint: Vec<f32>,
    pub outcome: Outcome,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlertKind {
    PerformanceDrop,
    EmbeddingDrift,
}

impl fmt::Display for AlertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlertKind::PerformanceDrop => "PERFORMANCE_DROP",
            AlertKind::EmbeddingDrift => "EMBEDDING_DRIFT",
        })
    }
}

/// A detector finding before it becomes a logged alert.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub kind: AlertKind,
    pub value: f64,
    pub threshold: f64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: String,
    pub task_id: String,
    pub deployment_id: String,
    pub kind: AlertKind,
    pub value: f64,
    pub threshold: f64,
    /// Feedback count identifying the window state that raised it.
    pub window_seq: u64,
    pub message: String,
    pub raised_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub timestamp: DateTime<Utc>,
    pub value: f64,
    pub window_size: usize,
    pub seq: u64,
    pub deployment_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorState {
    pub task_id: String,
    pub deployment_id: String,
    pub model_id: String,
    pub metric: MetricName,
    pub window_size: usize,
    pub thresholds: Thresholds,
    pub reference: Reference,
    pub window: VecDeque<WindowSample>,
    /// Feedback calls since deployment.
    pub seq: u64,
    /// Window state at which each alert kind last fired.
    pub last_alert: BTreeMap<AlertKind, u64>,
}

impl MonitorState {
    pub fn new(
        task_id: &str,
        deployment_id: &str,
        model_id: &str,
        metric: MetricName,
        window_size: usize,
        thresholds: Thresholds,
        reference: Reference,
    ) -> Result<Self> {
        if window_size == 0 {
            return Err(Error::validation("window size must be >= 1"));
        }
        Ok(MonitorState {
            task_id: task_id.to_string(),
            deployment_id: deployment_id.to_string(),
            model_id: model_id.to_string(),
            metric,
            window_size,
            thresholds,
            reference,
            window: VecDeque::new(),
            seq: 0,
            last_alert: BTreeMap::new(),
        })
    }

    pub fn is_full(&self) -> bool {
        self.window.len() >= self.window_size
    }

    pub fn push(&mut self, mut sample: WindowSample) {
        self.seq += 1;
        sample.seq = self.seq;
        self.window.push_back(sample);
        while self.window.len() > self.window_size {
            self.window.pop_front();
        }
    }

    /// `A_t` over the current window.
    pub fn windowed_metric(&self) -> Result<f64> {
        if self.window.is_empty() {
            return Err(Error::validation("empty feedback window"));
        }
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        let mut scores = Vec::new();
        for s in &self.window {
            match s.outcome {
                Outcome::Label { truth: t, predicted: p } => {
                    truth.push(t);
                    pred.push(p);
                }
                Outcome::Score { value } => scores.push(value),
            }
        }
        match (truth.is_empty(), scores.is_empty()) {
            (false, true) => metrics::score_labels(self.metric, &truth, &pred),
            (true, false) => Ok(scores.iter().sum::<f64>() / scores.len() as f64),
            _ => Err(Error::Internal("mixed outcomes in one feedback window".into())),
        }
    }

    pub fn window_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0f64; self.reference.mean.len()];
        for s in &self.window {
            for (m, &x) in mean.iter_mut().zip(&s.fingerprint) {
                *m += x as f64;
            }
        }
        let n = self.window.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// `‖μ_win − μ_ref‖ / (‖σ_ref‖ / √W + ε)`.
    pub fn drift_z(&self) -> f64 {
        let shift = self
            .window_mean()
            .iter()
            .zip(&self.reference.mean)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let spread = self.reference.std.iter().map(|s| s * s).sum::<f64>().sqrt();
        shift / (spread / (self.window_size as f64).sqrt() + self.thresholds.epsilon)
    }

    /// Runs the detector and keeps findings not yet raised for this window
    /// state. Re-checking an unchanged window returns nothing.
    pub fn check_drift(&mut self, detector: &dyn DriftDetector) -> Vec<Detection> {
        let seq = self.seq;
        let found: Vec<Detection> = detector
            .detect(self)
            .into_iter()
            .filter(|d| self.last_alert.get(&d.kind) != Some(&seq))
            .collect();
        for d in &found {
            self.last_alert.insert(d.kind, seq);
        }
        found
    }
}

pub trait DriftDetector: Send + Sync {
    fn detect(&self, state: &MonitorState) -> Vec<Detection>;
}

/// Windowed metric drop plus latent mean-shift z-score. Both need a full
/// window.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanShiftDetector;

impl DriftDetector for MeanShiftDetector {
    fn detect(&self, state: &MonitorState) -> Vec<Detection> {
        let mut out = Vec::new();
        if !state.is_full() {
            return out;
        }
        let th = &state.thresholds;
        if let Ok(a) = state.windowed_metric() {
            let floor = state.reference.baseline - th.metric_drop;
            if a < floor {
                out.push(Detection {
                    kind: AlertKind::PerformanceDrop,
                    value: a,
                    threshold: floor,
                    message: format!("windowed {} {a:.4} fell below {floor:.4}", state.metric),
                });
            }
        }
        let z = state.drift_z();
        if z > th.z_threshold {
            out.push(Detection {
                kind: AlertKind::EmbeddingDrift,
                value: z,
                threshold: th.z_threshold,
                message: format!("latent mean shifted by z = {z:.2}"),
            });
        }
        out
    }
}
