//! Serving and monitoring of a task's deployed model: predictions with
//! fingerprints, windowed feedback metrics, drift alerts and continuous
//! training cycles that feed production images back into development.

mod state;

use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::automl::{AutoMl, AutoMlConfig, SearchSpace};
use crate::dataset::{decode_image, ImageContainer, IMAGE_BYTES};
use crate::embedder::{normalize_pixels, Embedder, Fingerprint};
use crate::error::{Error, Result};
use crate::fsutil::{append_line, write_atomic};
use crate::metrics::{self, TaskKind};
use crate::models::{evaluate_on, MetricValue};
use crate::task_model::{TaskModel, UNLABELED};
use crate::workspace::Workspace;

pub use state::{
    Alert, AlertKind, Detection, DriftDetector, MeanShiftDetector, MetricPoint, MonitorState, Outcome, Reference, Thresholds,
    WindowSample,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub window_size: usize,
    pub thresholds: Thresholds,
    /// Start a training cycle whenever feedback raises an alert.
    pub auto_ct: bool,
    /// Strategies executed per training cycle.
    pub ct_strategies: usize,
    pub ct_space: SearchSpace,
    pub automl: AutoMlConfig,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            window_size: 100,
            thresholds: Thresholds::default(),
            auto_ct: true,
            ct_strategies: 3,
            ct_space: SearchSpace::default(),
            automl: AutoMlConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeploymentStatus {
    Live,
    Superseded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub deployment_id: String,
    pub task_id: String,
    pub model_id: String,
    pub deployed_at: DateTime<Utc>,
    pub status: DeploymentStatus,
}

/// A true label given as class index or class name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Index(usize),
    Name(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageInput {
    /// An image previously sent to `predict`.
    Id(String),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prediction {
    Class { label: usize, class_name: String },
    Reconstruction { neg_mse: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub image_id: String,
    pub deployment_id: String,
    pub model_id: String,
    pub prediction: Prediction,
    pub fingerprint: Fingerprint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub image_id: String,
    pub point: MetricPoint,
    pub alerts: Vec<Alert>,
    pub ct: Option<CtRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtStatus {
    Queued,
    /// Folded into the cycle already in flight.
    Coalesced,
    Succeeded,
    Failed,
}

/// One event of a continuous-training cycle; `ct.jsonl` holds them in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtRecord {
    pub cycle_id: String,
    pub task_id: String,
    pub status: CtStatus,
    pub alert_id: Option<String>,
    pub at: DateTime<Utc>,
    #[serde(default)]
    pub dataset_version: Option<u32>,
    #[serde(default)]
    pub feedback_images: usize,
    #[serde(default)]
    pub run_ids: Vec<String>,
    #[serde(default)]
    pub best_model_id: Option<String>,
    /// Deployment created by the cycle, if the new model was better.
    #[serde(default)]
    pub redeployed: Option<String>,
    #[serde(default)]
    pub metric_before: Option<MetricValue>,
    #[serde(default)]
    pub metric_after: Option<MetricValue>,
    #[serde(default)]
    pub error: Option<String>,
}

impl CtRecord {
    fn event(cycle_id: &str, task_id: &str, status: CtStatus, alert_id: Option<&str>) -> Self {
        CtRecord {
            cycle_id: cycle_id.to_string(),
            task_id: task_id.to_string(),
            status,
            alert_id: alert_id.map(String::from),
            at: Utc::now(),
            dataset_version: None,
            feedback_images: 0,
            run_ids: Vec::new(),
            best_model_id: None,
            redeployed: None,
            metric_before: None,
            metric_after: None,
            error: None,
        }
    }
}

struct Live {
    state: MonitorState,
    deployment: Deployment,
    kind: TaskKind,
    model: Arc<TaskModel>,
    embedder: Arc<Embedder>,
    classes: Vec<String>,
}

type Slot = Arc<Mutex<Option<Live>>>;

struct Inner {
    ws: Workspace,
    config: MonitorConfig,
    detector: Box<dyn DriftDetector>,
    slots: Mutex<HashMap<String, Slot>>,
    /// Task id -> cycle in flight.
    ct: Mutex<HashMap<String, String>>,
    ct_idle: Condvar,
}

#[derive(Clone)]
pub struct Monitor {
    inner: Arc<Inner>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(s.lines().filter_map(|l| serde_json::from_str(l).ok()).collect()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

fn next_id(prefix: &str, n: usize) -> String {
    format!("{prefix}-{:06}", n + 1)
}

/// Content address of a decoded image.
pub fn image_id(chw: &[u8]) -> String {
    format!("img-{}", &hex::encode(Sha256::digest(chw))[..32])
}

impl Monitor {
    pub fn new(ws: Workspace, config: MonitorConfig) -> Self {
        Self::with_detector(ws, config, Box::new(MeanShiftDetector))
    }

    pub fn with_detector(ws: Workspace, config: MonitorConfig, detector: Box<dyn DriftDetector>) -> Self {
        Monitor {
            inner: Arc::new(Inner {
                ws,
                config,
                detector,
                slots: Mutex::new(HashMap::new()),
                ct: Mutex::new(HashMap::new()),
                ct_idle: Condvar::new(),
            }),
        }
    }

    pub fn workspace(&self) -> &Workspace {
        &self.inner.ws
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.inner.config
    }

    fn dir(&self, task_id: &str) -> PathBuf {
        self.inner.ws.monitor_dir(task_id)
    }

    fn file(&self, task_id: &str, name: &str) -> PathBuf {
        self.dir(task_id).join(name)
    }

    fn slot(&self, task_id: &str) -> Slot {
        lock(&self.inner.slots).entry(task_id.to_string()).or_default().clone()
    }

    /// Locks the task's live state, loading it from disk on first use.
    fn with_live<R>(&self, task_id: &str, f: impl FnOnce(&mut Live) -> Result<R>) -> Result<R> {
        let slot = self.slot(task_id);
        let mut guard = lock(&slot);
        if guard.is_none() {
            *guard = self.load_live(task_id)?;
        }
        match guard.as_mut() {
            Some(live) => f(live),
            None => Err(Error::not_found(format!("live deployment for task {task_id}"))),
        }
    }

    fn load_live(&self, task_id: &str) -> Result<Option<Live>> {
        let task = self.inner.ws.models.task(task_id)?;
        let path = self.file(task_id, "state.json");
        if !path.exists() {
            return Ok(None);
        }
        let state: MonitorState = serde_json::from_slice(&fs::read(&path)?)?;
        let Some(deployment) = self.deployments(task_id)?.into_iter().find(|d| d.status == DeploymentStatus::Live) else {
            return Ok(None);
        };
        if deployment.deployment_id != state.deployment_id {
            return Err(Error::Integrity(format!(
                "monitor state of {task_id} belongs to {}, live deployment is {}",
                state.deployment_id, deployment.deployment_id
            )));
        }
        let ws = &self.inner.ws;
        let model = ws.models.load_model(&ws.models.model(&deployment.model_id)?)?;
        let embedder = ws.embedder(&state.reference.embedder_version)?;
        let record = ws.datasets.get(&task.dataset_id, Some(task.dataset_version))?;
        Ok(Some(Live {
            state,
            deployment,
            kind: task.task_kind,
            model: Arc::new(model),
            embedder: Arc::new(embedder),
            classes: record.class_labels,
        }))
    }

    fn save_state(&self, state: &MonitorState) -> Result<()> {
        fs::create_dir_all(self.dir(&state.task_id))?;
        write_atomic(&self.file(&state.task_id, "state.json"), &serde_json::to_vec(state)?)
    }

    // ---- deployment

    pub fn deployments(&self, task_id: &str) -> Result<Vec<Deployment>> {
        let mut out: Vec<Deployment> = Vec::new();
        for d in read_jsonl::<Deployment>(&self.file(task_id, "deployments.jsonl"))? {
            match out.iter_mut().find(|o| o.deployment_id == d.deployment_id) {
                Some(o) => *o = d,
                None => out.push(d),
            }
        }
        Ok(out)
    }

    pub fn live_deployment(&self, task_id: &str) -> Result<Deployment> {
        self.with_live(task_id, |l| Ok(l.deployment.clone()))
    }

    /// Makes `model_id` the task's live model. The previous deployment is
    /// superseded and the reference window is rebuilt from the evaluation
    /// split of the task's current dataset version.
    pub fn deploy(&self, task_id: &str, model_id: &str) -> Result<Deployment> {
        let ws = &self.inner.ws;
        let task = ws.models.task(task_id)?;
        let record = ws.models.model(model_id)?;
        let net = ws.models.load_model(&record)?;
        if net.task_kind() != task.task_kind {
            return Err(Error::validation(format!(
                "model {model_id} solves {} but task {task_id} is {}",
                net.task_kind(),
                task.task_kind
            )));
        }
        let container = ws.datasets.load_container(&task.dataset_id, task.dataset_version)?;
        if let TaskModel::Classifier(c) = &net {
            if c.config.num_classes != container.manifest.classes.len() {
                return Err(Error::validation(format!(
                    "model {model_id} has {} classes, task {task_id} has {}",
                    c.config.num_classes,
                    container.manifest.classes.len()
                )));
            }
        }
        let split = container.eval_split().to_string();
        let baseline = evaluate_on(&net, task.metric_name, &container, &split)?;
        let embedder = ws.active_embedder()?;
        let range = container.split(&split).map(|s| s.range()).unwrap_or_default();
        let images = normalize_pixels::<f32>(&container.pixels[range.start * IMAGE_BYTES..range.end * IMAGE_BYTES], range.len())?;
        let reference = Reference::from_vectors(&embedder.embed(&images)?, baseline, &split, embedder.version())?;

        let slot = self.slot(task_id);
        let mut guard = lock(&slot);
        fs::create_dir_all(self.dir(task_id))?;
        let existing = self.deployments(task_id)?;
        let deployment = Deployment {
            deployment_id: next_id("deploy", existing.len()),
            task_id: task_id.to_string(),
            model_id: model_id.to_string(),
            deployed_at: Utc::now(),
            status: DeploymentStatus::Live,
        };
        let mut lines = Vec::new();
        for mut d in existing.into_iter().filter(|d| d.status == DeploymentStatus::Live) {
            d.status = DeploymentStatus::Superseded;
            lines.push(serde_json::to_string(&d)?);
        }
        lines.push(serde_json::to_string(&deployment)?);
        let state = MonitorState::new(
            task_id,
            &deployment.deployment_id,
            model_id,
            task.metric_name,
            self.inner.config.window_size,
            self.inner.config.thresholds,
            reference,
        )?;
        // One write, so a crash never leaves two live deployments.
        append_line(&self.file(task_id, "deployments.jsonl"), &lines.join("\n"))?;
        self.save_state(&state)?;
        *guard = Some(Live {
            state,
            deployment: deployment.clone(),
            kind: task.task_kind,
            model: Arc::new(net),
            embedder: Arc::new(embedder),
            classes: container.manifest.classes.clone(),
        });
        Ok(deployment)
    }

    // ---- serving

    fn image_path(&self, task_id: &str, image_id: &str) -> PathBuf {
        self.dir(task_id).join("images").join(format!("{image_id}.bin"))
    }

    fn keep_image(&self, task_id: &str, id: &str, chw: &[u8]) -> Result<()> {
        let path = self.image_path(task_id, id);
        if !path.exists() {
            fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
            write_atomic(&path, chw)?;
        }
        Ok(())
    }

    fn load_image(&self, task_id: &str, id: &str) -> Result<Vec<u8>> {
        let path = self.image_path(task_id, id);
        match fs::read(&path) {
            Ok(b) if b.len() == IMAGE_BYTES => Ok(b),
            Ok(_) => Err(Error::Integrity(format!("stored image {id} is truncated"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::not_found(format!("image {id}"))),
            Err(e) => Err(e.into()),
        }
    }

    /// Runs the deployed model in eval mode and fingerprints the input.
    pub fn predict(&self, task_id: &str, image: &[u8]) -> Result<PredictResponse> {
        let chw = decode_image(image, false)?;
        let (model, embedder, classes, deployment) =
            self.with_live(task_id, |l| Ok((l.model.clone(), l.embedder.clone(), l.classes.clone(), l.deployment.clone())))?;
        let id = image_id(&chw);
        let (prediction, fingerprint, _) = infer(&model, &embedder, &classes, &chw, &id)?;
        self.keep_image(task_id, &id, &chw)?;
        Ok(PredictResponse {
            image_id: id,
            deployment_id: deployment.deployment_id,
            model_id: deployment.model_id,
            prediction,
            fingerprint,
        })
    }

    // ---- feedback and drift

    /// Adds a labeled production sample to the window, records `A_t` and
    /// raises any new alerts (starting a training cycle if configured).
    pub fn feedback(&self, task_id: &str, image: ImageInput, label: Option<Label>) -> Result<FeedbackResponse> {
        let chw = match &image {
            ImageInput::Id(id) => self.load_image(task_id, id)?,
            ImageInput::Bytes(b) => decode_image(b, false)?,
        };
        let id = image_id(&chw);
        let (point, alerts) = self.with_live(task_id, |l| {
            let truth = resolve_label(l.kind, &l.classes, label.as_ref())?;
            let (_, fingerprint, outcome) = infer(&l.model, &l.embedder, &l.classes, &chw, &id)?;
            let outcome = match (outcome, truth) {
                (Outcome::Label { predicted, .. }, Some(truth)) => Outcome::Label { truth, predicted },
                (o, _) => o,
            };
            self.keep_image(task_id, &id, &chw)?;
            l.state.push(WindowSample { seq: 0, image_id: id.clone(), fingerprint: fingerprint.vector, outcome });
            let point = MetricPoint {
                timestamp: Utc::now(),
                value: l.state.windowed_metric()?,
                window_size: l.state.window.len(),
                seq: l.state.seq,
                deployment_id: l.state.deployment_id.clone(),
            };
            append_line(&self.file(task_id, "metrics.jsonl"), &serde_json::to_string(&point)?)?;
            let alerts = self.raise(&mut l.state)?;
            self.save_state(&l.state)?;
            Ok((point, alerts))
        })?;
        let ct = match alerts.first() {
            Some(a) if self.inner.config.auto_ct => Some(self.trigger_ct(task_id, Some(a))?),
            _ => None,
        };
        Ok(FeedbackResponse { image_id: id, point, alerts, ct })
    }

    fn raise(&self, state: &mut MonitorState) -> Result<Vec<Alert>> {
        let found = state.check_drift(self.inner.detector.as_ref());
        if found.is_empty() {
            return Ok(Vec::new());
        }
        let path = self.file(&state.task_id, "alerts.jsonl");
        let mut n = read_jsonl::<Alert>(&path)?.len();
        let mut out = Vec::new();
        for d in found {
            let alert = Alert {
                alert_id: next_id("alert", n),
                task_id: state.task_id.clone(),
                deployment_id: state.deployment_id.clone(),
                kind: d.kind,
                value: d.value,
                threshold: d.threshold,
                window_seq: state.seq,
                message: d.message,
                raised_at: Utc::now(),
            };
            append_line(&path, &serde_json::to_string(&alert)?)?;
            n += 1;
            out.push(alert);
        }
        Ok(out)
    }

    /// Re-checks the current window; an unchanged window raises nothing new.
    pub fn check_drift(&self, task_id: &str) -> Result<Vec<Alert>> {
        self.with_live(task_id, |l| {
            let alerts = self.raise(&mut l.state)?;
            self.save_state(&l.state)?;
            Ok(alerts)
        })
    }

    pub fn state(&self, task_id: &str) -> Result<MonitorState> {
        self.with_live(task_id, |l| Ok(l.state.clone()))
    }

    pub fn metrics(&self, task_id: &str) -> Result<Vec<MetricPoint>> {
        self.inner.ws.models.task(task_id)?;
        read_jsonl(&self.file(task_id, "metrics.jsonl"))
    }

    pub fn alerts(&self, task_id: &str) -> Result<Vec<Alert>> {
        self.inner.ws.models.task(task_id)?;
        read_jsonl(&self.file(task_id, "alerts.jsonl"))
    }

    // ---- continuous training

    pub fn ct_records(&self, task_id: &str) -> Result<Vec<CtRecord>> {
        read_jsonl(&self.file(task_id, "ct.jsonl"))
    }

    pub fn ct_in_flight(&self, task_id: &str) -> Option<String> {
        lock(&self.inner.ct).get(task_id).cloned()
    }

    /// Blocks until no training cycle is in flight for the task.
    pub fn wait_ct(&self, task_id: &str) {
        let mut ct = lock(&self.inner.ct);
        while ct.contains_key(task_id) {
            ct = self.inner.ct_idle.wait(ct).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Queues a training cycle on a background worker. While one is in
    /// flight for the task, further triggers are coalesced into it.
    pub fn trigger_ct(&self, task_id: &str, alert: Option<&Alert>) -> Result<CtRecord> {
        self.inner.ws.models.task(task_id)?;
        let alert_id = alert.map(|a| a.alert_id.as_str());
        let path = self.file(task_id, "ct.jsonl");
        let mut ct = lock(&self.inner.ct);
        if let Some(cycle) = ct.get(task_id) {
            let rec = CtRecord::event(cycle, task_id, CtStatus::Coalesced, alert_id);
            append_line(&path, &serde_json::to_string(&rec)?)?;
            return Ok(rec);
        }
        fs::create_dir_all(self.dir(task_id))?;
        let queued = self.ct_records(task_id)?.iter().filter(|r| r.status == CtStatus::Queued).count();
        let rec = CtRecord::event(&next_id("ct", queued), task_id, CtStatus::Queued, alert_id);
        append_line(&path, &serde_json::to_string(&rec)?)?;
        ct.insert(task_id.to_string(), rec.cycle_id.clone());
        drop(ct);

        let this = self.clone();
        let queued_rec = rec.clone();
        let spawned = std::thread::Builder::new().name(format!("ct-{task_id}")).spawn(move || {
            let _idle = InFlight { monitor: &this, task_id: &queued_rec.task_id };
            let result = catch_unwind(AssertUnwindSafe(|| this.run_cycle(&queued_rec)))
                .unwrap_or_else(|_| Err(Error::Internal("training cycle panicked".into())));
            let done = match result {
                Ok(r) => r,
                Err(e) => CtRecord { error: Some(e.to_string()), ..CtRecord::event(&queued_rec.cycle_id, &queued_rec.task_id, CtStatus::Failed, queued_rec.alert_id.as_deref()) },
            };
            let _ = append_line(&this.file(&done.task_id, "ct.jsonl"), &serde_json::to_string(&done).unwrap_or_default());
        });
        if let Err(e) = spawned {
            lock(&self.inner.ct).remove(task_id);
            self.inner.ct_idle.notify_all();
            return Err(e.into());
        }
        Ok(rec)
    }

    /// Adds the feedback window to the task's training split as a new
    /// dataset version, develops on it and redeploys if the new best model
    /// beats the live one on the evaluation split.
    fn run_cycle(&self, queued: &CtRecord) -> Result<CtRecord> {
        let ws = &self.inner.ws;
        let task_id = &queued.task_id;
        let (samples, live_model, embedder) =
            self.with_live(task_id, |l| Ok((l.state.window.clone(), l.deployment.model_id.clone(), l.embedder.clone())))?;
        if samples.is_empty() {
            return Err(Error::validation("feedback window is empty"));
        }
        let mut extra = Vec::with_capacity(samples.len() * IMAGE_BYTES);
        let mut extra_labels = Vec::with_capacity(samples.len());
        for s in &samples {
            extra.extend(self.load_image(task_id, &s.image_id)?);
            extra_labels.push(match s.outcome {
                Outcome::Label { truth, .. } => truth as u16,
                Outcome::Score { .. } => UNLABELED,
            });
        }

        let task = ws.models.task(task_id)?;
        let before = task.current_best_metric;
        let record = ws.datasets.get(&task.dataset_id, Some(task.dataset_version))?;
        let container = ws.datasets.load_container(&task.dataset_id, task.dataset_version)?;
        let grown = with_training_images(&container, &extra, &extra_labels)?;
        let note = format!(
            "{} plus {} feedback images (cycle {}, alert {})",
            record.key(),
            samples.len(),
            queued.cycle_id,
            queued.alert_id.as_deref().unwrap_or("manual")
        );
        let (new_record, _) = ws.datasets.register(&grown, &record.name, task.task_kind, &note)?;
        ws.models.set_task_dataset(task_id, new_record.version)?;
        if new_record.embedding_for(embedder.version()).is_none() {
            ws.fingerprint_dataset(&new_record.dataset_id, new_record.version, &embedder)?;
        }

        let automl = AutoMl::new(&ws.datasets, &ws.models, self.inner.config.automl.clone());
        let report = automl.develop(task_id, self.inner.config.ct_strategies, &self.inner.config.ct_space)?;

        let task = ws.models.task(task_id)?;
        let split = grown.eval_split();
        let live_score = ws.models.evaluate(&ws.models.model(&live_model)?, &task, &grown, split)?;
        let mut redeployed = None;
        if report.best_model.model_id != live_model {
            let score = ws.models.evaluate(&report.best_model, &task, &grown, split)?;
            if score > live_score {
                redeployed = Some(self.deploy(task_id, &report.best_model.model_id)?.deployment_id);
            }
        }
        Ok(CtRecord {
            dataset_version: Some(new_record.version),
            feedback_images: samples.len(),
            run_ids: report.run_ids(),
            best_model_id: Some(report.best_model.model_id.clone()),
            redeployed,
            metric_before: Some(before),
            metric_after: Some(task.current_best_metric),
            ..CtRecord::event(&queued.cycle_id, task_id, CtStatus::Succeeded, queued.alert_id.as_deref())
        })
    }
}

/// Clears the in-flight marker when a cycle ends, however it ends.
struct InFlight<'a> {
    monitor: &'a Monitor,
    task_id: &'a str,
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        lock(&self.monitor.inner.ct).remove(self.task_id);
        self.monitor.inner.ct_idle.notify_all();
    }
}

fn resolve_label(kind: TaskKind, classes: &[String], label: Option<&Label>) -> Result<Option<usize>> {
    match (kind, label) {
        (TaskKind::Reconstruction, _) => Ok(None),
        (TaskKind::Classification, None) => Err(Error::validation("classification feedback needs a label")),
        (TaskKind::Classification, Some(Label::Index(i))) if *i < classes.len() => Ok(Some(*i)),
        (TaskKind::Classification, Some(Label::Index(i))) => {
            Err(Error::validation(format!("label {i} out of range for {} classes", classes.len())))
        }
        (TaskKind::Classification, Some(Label::Name(n))) => classes
            .iter()
            .position(|c| c == n)
            .map(Some)
            .ok_or_else(|| Error::validation(format!("unknown class `{n}`"))),
    }
}

/// Prediction, fingerprint and the window outcome (truth filled in later).
fn infer(model: &TaskModel, embedder: &Embedder, classes: &[String], chw: &[u8], id: &str) -> Result<(Prediction, Fingerprint, Outcome)> {
    let x = normalize_pixels::<f32>(chw, 1)?;
    let (prediction, outcome) = match model {
        TaskModel::Classifier(c) => {
            let label = c.predict(&x)?[0];
            let class_name = classes.get(label).cloned().unwrap_or_else(|| label.to_string());
            (Prediction::Class { label, class_name }, Outcome::Label { truth: label, predicted: label })
        }
        TaskModel::Autoencoder(a) => {
            let v = metrics::neg_mse(a.reconstruct(&x)?.data(), x.data())?;
            (Prediction::Reconstruction { neg_mse: v }, Outcome::Score { value: v })
        }
    };
    let fingerprint = embedder.fingerprint_images(&x, &[id.to_string()])?.remove(0);
    Ok((prediction, fingerprint, outcome))
}

/// The container with `pixels` appended to its training split; other splits
/// keep their contents and order.
pub fn with_training_images(c: &ImageContainer, pixels: &[u8], labels: &[u16]) -> Result<ImageContainer> {
    let train = c.train_split().to_string();
    let mut out_px = Vec::with_capacity(c.pixels.len() + pixels.len());
    let mut out_labels = Vec::with_capacity(c.labels.len() + labels.len());
    let mut splits = Vec::new();
    for s in &c.manifest.splits {
        let r = s.range();
        out_px.extend_from_slice(&c.pixels[r.start * IMAGE_BYTES..r.end * IMAGE_BYTES]);
        out_labels.extend_from_slice(&c.labels[r.clone()]);
        let mut len = r.len();
        if s.name == train {
            out_px.extend_from_slice(pixels);
            out_labels.extend_from_slice(labels);
            len += labels.len();
        }
        splits.push((s.name.clone(), len));
    }
    let splits: Vec<(&str, usize)> = splits.iter().map(|(n, l)| (n.as_str(), *l)).collect();
    ImageContainer::new(&c.manifest.name, out_px, out_labels, &splits, c.manifest.classes.clone())
}
