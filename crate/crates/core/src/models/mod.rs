//! The model registry: tasks, run tracking (failures included), content-addressed
//! checkpoints and best-model selection.
//!
//! Layout under the registry root:
//!
//! ```text
//! runs.jsonl     one RunRecord snapshot per line, append-only
//! models.jsonl   one ModelRecord snapshot per line
//! tasks.jsonl    one TaskSpec snapshot per line
//! checkpoints/<hash>.ckpt
//! ```
//!
//! The latest snapshot of an id wins on read.

mod metric_value;
mod select;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageContainer;
use crate::embedder::normalize_pixels;
use crate::error::{Error, Result};
use crate::fsutil::{append_line, DirLock};
use crate::metrics::{MetricName, TaskKind};
use crate::nn::arch::Preset;
use crate::nn::checkpoint::Checkpoint;
use crate::task_model::{labeled_subset, TaskModel};

pub use metric_value::MetricValue;
pub use select::{compare_runs, select_best_run};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Failed,
    Succeeded,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Pending => "pending",
            RunStatus::Running => "running",
            RunStatus::Failed => "failed",
            RunStatus::Succeeded => "succeeded",
        }
    }

    pub fn can_become(self, next: RunStatus) -> bool {
        matches!(
            (self, next),
            (RunStatus::Pending, RunStatus::Running)
                | (RunStatus::Running, RunStatus::Failed)
                | (RunStatus::Running, RunStatus::Succeeded)
        )
    }
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Empty until the registry assigns one.
    #[serde(default)]
    pub run_id: String,
    pub task_id: String,
    /// The executed plan, serialized as-is.
    #[serde(default)]
    pub strategy_plan: Option<serde_json::Value>,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, serde_json::Value>,
    pub status: RunStatus,
    pub metric_name: MetricName,
    pub metric_value: MetricValue,
    #[serde(default)]
    pub loss_history: Vec<f64>,
    /// Training cost in epochs; 0 for pure evaluation.
    #[serde(default)]
    pub epochs_trained: usize,
    #[serde(default)]
    pub checkpoint_hash: Option<String>,
    #[serde(default)]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub ended_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub failure_reason: Option<String>,
}

impl RunRecord {
    pub fn pending(task_id: &str, metric_name: MetricName) -> Self {
        RunRecord {
            run_id: String::new(),
            task_id: task_id.to_string(),
            strategy_plan: None,
            hyperparameters: BTreeMap::new(),
            status: RunStatus::Pending,
            metric_name,
            metric_value: MetricValue::NEG_INFINITY,
            loss_history: Vec::new(),
            epochs_trained: 0,
            checkpoint_hash: None,
            started_at: None,
            ended_at: None,
            failure_reason: None,
        }
    }

    fn check(&self) -> Result<()> {
        match self.status {
            RunStatus::Succeeded => {
                if self.checkpoint_hash.as_deref().is_none_or(str::is_empty) {
                    return Err(Error::validation("a succeeded run needs a checkpoint hash"));
                }
                if !self.metric_value.is_finite() {
                    return Err(Error::validation("a succeeded run needs a finite metric value"));
                }
            }
            RunStatus::Failed => {
                if self.failure_reason.as_deref().is_none_or(|r| r.trim().is_empty()) {
                    return Err(Error::validation("a failed run needs a failure reason"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// What a checkpoint must decode to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: String,
    pub preset: Preset,
    pub config: serde_json::Value,
}

impl Architecture {
    pub fn of(ck: &Checkpoint) -> Self {
        Architecture {
            kind: ck.manifest.kind.clone(),
            preset: ck.manifest.preset,
            config: ck.manifest.config.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPerformance {
    pub dataset_id: String,
    pub version: u32,
    pub metric_name: MetricName,
    pub value: MetricValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    pub architecture: Architecture,
    pub checkpoint_hash: String,
    pub run_id: String,
    pub task_id: String,
    #[serde(default)]
    pub known_performances: Vec<DatasetPerformance>,
    pub created_at: DateTime<Utc>,
}

impl ModelRecord {
    /// The best known value of `metric` on `dataset_id` (any version).
    pub fn performance_on(&self, dataset_id: &str, metric: MetricName) -> Option<f64> {
        self.known_performances
            .iter()
            .filter(|p| p.dataset_id == dataset_id && p.metric_name == metric && p.value.is_finite())
            .map(|p| p.value.get())
            .max_by(f64::total_cmp)
    }
}

/// A task `(I, A, T_a)` and its best metric so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub dataset_id: String,
    pub dataset_version: u32,
    pub metric_name: MetricName,
    pub task_kind: TaskKind,
    pub current_best_metric: MetricValue,
    #[serde(default)]
    pub best_model_id: Option<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Debug)]
pub struct ModelStore {
    root: PathBuf,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        // Torn lines from interrupted appends are skipped; complete lines
        // are only ever written whole.
        if let Ok(v) = serde_json::from_str(line) {
            out.push(v);
        }
    }
    Ok(out)
}

/// Collapses snapshots to the latest per key, in first-seen order.
fn latest<T>(items: Vec<T>, key: impl Fn(&T) -> &str) -> Vec<T> {
    let mut order: Vec<String> = Vec::new();
    let mut map: BTreeMap<String, T> = BTreeMap::new();
    for it in items {
        let k = key(&it).to_string();
        if !map.contains_key(&k) {
            order.push(k.clone());
        }
        map.insert(k, it);
    }
    order.into_iter().map(|k| map.remove(&k).expect("key")).collect()
}

fn next_id(prefix: &str, existing: usize) -> String {
    format!("{prefix}-{:06}", existing + 1)
}

impl ModelStore {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))?;
        Ok(ModelStore { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn runs_path(&self) -> PathBuf {
        self.root.join("runs.jsonl")
    }

    fn models_path(&self) -> PathBuf {
        self.root.join("models.jsonl")
    }

    fn tasks_path(&self) -> PathBuf {
        self.root.join("tasks.jsonl")
    }

    // ---- runs

    /// Records a new run (empty `run_id`) or a status update of an existing one.
    pub fn record_run(&self, mut run: RunRecord) -> Result<String> {
        run.check()?;
        let _lock = DirLock::acquire(&self.root)?;
        let runs = self.runs()?;
        if run.run_id.is_empty() {
            run.run_id = next_id("run", runs.len());
        } else {
            let prev = runs
                .iter()
                .find(|r| r.run_id == run.run_id)
                .ok_or_else(|| Error::not_found(format!("run {}", run.run_id)))?;
            if !prev.status.can_become(run.status) {
                return Err(Error::IllegalTransition {
                    run_id: run.run_id,
                    from: prev.status.to_string(),
                    to: run.status.to_string(),
                });
            }
            if prev.task_id != run.task_id {
                return Err(Error::validation("a run cannot move between tasks"));
            }
        }
        append_line(&self.runs_path(), &serde_json::to_string(&run)?)?;
        Ok(run.run_id)
    }

    /// Latest snapshot of every run, in creation order.
    pub fn runs(&self) -> Result<Vec<RunRecord>> {
        Ok(latest(read_jsonl(&self.runs_path())?, |r: &RunRecord| &r.run_id))
    }

    pub fn runs_for(&self, task_id: &str) -> Result<Vec<RunRecord>> {
        Ok(self.runs()?.into_iter().filter(|r| r.task_id == task_id).collect())
    }

    pub fn run(&self, run_id: &str) -> Result<RunRecord> {
        self.runs()?
            .into_iter()
            .find(|r| r.run_id == run_id)
            .ok_or_else(|| Error::not_found(format!("run {run_id}")))
    }

    // ---- checkpoints

    pub fn checkpoint_path(&self, hash: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{hash}.ckpt"))
    }

    pub fn put_checkpoint(&self, ck: &Checkpoint) -> Result<String> {
        ck.store_in(&self.root.join("checkpoints"))?;
        Ok(ck.content_hash().to_string())
    }

    /// Loads and re-verifies a stored checkpoint.
    pub fn load_checkpoint(&self, hash: &str) -> Result<Checkpoint> {
        let ck = Checkpoint::load(&self.checkpoint_path(hash))?;
        if ck.content_hash() != hash {
            return Err(Error::Integrity(format!("checkpoint file {hash} holds {}", ck.content_hash())));
        }
        Ok(ck)
    }

    // ---- models

    /// Registers the checkpoint of a succeeded run as a model.
    pub fn register_model(&self, run_id: &str, ck: &Checkpoint, performances: Vec<DatasetPerformance>) -> Result<ModelRecord> {
        let run = self.run(run_id)?;
        if run.status != RunStatus::Succeeded || run.checkpoint_hash.as_deref() != Some(ck.content_hash()) {
            return Err(Error::validation(format!("run {run_id} has not succeeded with checkpoint {}", ck.content_hash())));
        }
        self.put_checkpoint(ck)?;
        let _lock = DirLock::acquire(&self.root)?;
        let models = self.models()?;
        let record = ModelRecord {
            model_id: next_id("model", models.len()),
            architecture: Architecture::of(ck),
            checkpoint_hash: ck.content_hash().to_string(),
            run_id: run_id.to_string(),
            task_id: run.task_id,
            known_performances: performances,
            created_at: Utc::now(),
        };
        append_line(&self.models_path(), &serde_json::to_string(&record)?)?;
        Ok(record)
    }

    pub fn models(&self) -> Result<Vec<ModelRecord>> {
        Ok(latest(read_jsonl(&self.models_path())?, |m: &ModelRecord| &m.model_id))
    }

    pub fn model(&self, model_id: &str) -> Result<ModelRecord> {
        self.models()?
            .into_iter()
            .find(|m| m.model_id == model_id)
            .ok_or_else(|| Error::not_found(format!("model {model_id}")))
    }

    pub fn add_model_performance(&self, model_id: &str, perf: DatasetPerformance) -> Result<ModelRecord> {
        let _lock = DirLock::acquire(&self.root)?;
        let mut m = self.model(model_id)?;
        m.known_performances.push(perf);
        append_line(&self.models_path(), &serde_json::to_string(&m)?)?;
        Ok(m)
    }

    /// Loads a model's weights, checking them against its architecture.
    pub fn load_model(&self, model: &ModelRecord) -> Result<TaskModel> {
        let ck = self.load_checkpoint(&model.checkpoint_hash)?;
        if Architecture::of(&ck) != model.architecture {
            return Err(Error::Integrity(format!(
                "checkpoint {} does not match the architecture of {}",
                model.checkpoint_hash, model.model_id
            )));
        }
        TaskModel::from_checkpoint(&ck)
    }

    /// `A = m(T_a, I, Y_MD)`: the task metric of a model on one split.
    pub fn evaluate(&self, model: &ModelRecord, task: &TaskSpec, container: &ImageContainer, split: &str) -> Result<f64> {
        task.metric_name.check(task.task_kind)?;
        let net = self.load_model(model)?;
        if net.task_kind() != task.task_kind {
            return Err(Error::validation(format!(
                "model {} solves {} but the task is {}",
                model.model_id,
                net.task_kind(),
                task.task_kind
            )));
        }
        evaluate_on(&net, task.metric_name, container, split)
    }

    // ---- selection

    /// The best model for a task: argmax of the metric over succeeded runs.
    pub fn select_best(&self, task_id: &str) -> Result<(ModelRecord, RunRecord)> {
        let runs = self.runs_for(task_id)?;
        let best = select_best_run(&runs).ok_or_else(|| Error::NoModel(task_id.to_string()))?;
        let model = self
            .models()?
            .into_iter()
            .find(|m| m.run_id == best.run_id)
            .ok_or_else(|| Error::Internal(format!("run {} has no registered model", best.run_id)))?;
        Ok((model, best.clone()))
    }

    // ---- tasks

    pub fn create_task(&self, dataset_id: &str, version: u32, metric: MetricName, kind: TaskKind) -> Result<TaskSpec> {
        metric.check(kind)?;
        let _lock = DirLock::acquire(&self.root)?;
        let tasks = self.tasks()?;
        let task = TaskSpec {
            task_id: next_id("task", tasks.len()),
            dataset_id: dataset_id.to_string(),
            dataset_version: version,
            metric_name: metric,
            task_kind: kind,
            current_best_metric: MetricValue::NEG_INFINITY,
            best_model_id: None,
            created_at: Utc::now(),
        };
        append_line(&self.tasks_path(), &serde_json::to_string(&task)?)?;
        Ok(task)
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        Ok(latest(read_jsonl(&self.tasks_path())?, |t: &TaskSpec| &t.task_id))
    }

    pub fn task(&self, task_id: &str) -> Result<TaskSpec> {
        self.tasks()?
            .into_iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::not_found(format!("task {task_id}")))
    }

    /// Points the task at a new dataset version (used by continuous training).
    pub fn set_task_dataset(&self, task_id: &str, version: u32) -> Result<TaskSpec> {
        let _lock = DirLock::acquire(&self.root)?;
        let mut t = self.task(task_id)?;
        t.dataset_version = version;
        append_line(&self.tasks_path(), &serde_json::to_string(&t)?)?;
        Ok(t)
    }

    /// Raises `A_t` to `value` if it improves on it; `A_t` never decreases.
    pub fn offer_best(&self, task_id: &str, model_id: &str, value: f64) -> Result<TaskSpec> {
        let _lock = DirLock::acquire(&self.root)?;
        let mut t = self.task(task_id)?;
        if value.is_finite() && value.partial_cmp(&t.current_best_metric.get()) == Some(Ordering::Greater) {
            t.current_best_metric = MetricValue::new(value)?;
            t.best_model_id = Some(model_id.to_string());
            append_line(&self.tasks_path(), &serde_json::to_string(&t)?)?;
        }
        Ok(t)
    }
}

/// Scores a loaded model on one split of a container.
pub fn evaluate_on(net: &TaskModel, metric: MetricName, container: &ImageContainer, split: &str) -> Result<f64> {
    let range = container
        .split(split)
        .ok_or_else(|| Error::not_found(format!("split `{split}`")))?
        .range();
    let n = range.len();
    if n == 0 {
        return Err(Error::validation(format!("split `{split}` is empty")));
    }
    let pixels = &container.pixels[range.start * crate::dataset::IMAGE_BYTES..range.end * crate::dataset::IMAGE_BYTES];
    let images = normalize_pixels::<f32>(pixels, n)?;
    match net.task_kind() {
        TaskKind::Classification => {
            let classes = container.manifest.classes.len();
            let (x, y) = labeled_subset(&images, &container.labels[range], classes)?;
            net.evaluate(metric, &x, &y)
        }
        TaskKind::Reconstruction => net.evaluate(metric, &images, &[]),
    }
}
