//! Ranks model-development approaches for a task from fingerprints and
//! metadata of the stored datasets and models.

mod affinity;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetRecord, DatasetStore, ImageContainer, ImageRef};
use crate::embedder::{similarity, DatasetEmbedding};
use crate::error::{Error, Result};
use crate::metrics::{MetricName, TaskKind};
use crate::models::{ModelRecord, ModelStore};
use crate::task_model::{CLASSIFIER_KIND, UNLABELED};

pub use affinity::{class_shares, metadata_affinity};
pub use crate::models::TaskSpec;

/// Declaration order is the tie-break order among equal score and cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    Reuse,
    FineTune,
    DatasetConception,
    Retrain,
}

impl PlanKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanKind::Reuse => "reuse",
            PlanKind::FineTune => "fine_tune",
            PlanKind::DatasetConception => "dataset_conception",
            PlanKind::Retrain => "retrain",
        }
    }
}

impl fmt::Display for PlanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DatasetRef {
    pub dataset_id: String,
    pub version: u32,
}

impl DatasetRef {
    pub fn of(r: &DatasetRecord) -> Self {
        DatasetRef { dataset_id: r.dataset_id.clone(), version: r.version }
    }
}

impl fmt::Display for DatasetRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@v{}", self.dataset_id, self.version)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyPlan {
    pub kind: PlanKind,
    pub source_model: Option<String>,
    #[serde(default)]
    pub source_datasets: Vec<DatasetRef>,
    /// Epochs-equivalent.
    pub estimated_cost: usize,
    pub score: f64,
    pub rationale: String,
    pub fingerprint_based: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    /// Nearest datasets considered for reuse and fine-tuning.
    pub neighbours: usize,
    /// Distance scale; `None` uses the median pairwise distance between
    /// stored dataset embeddings.
    pub tau: Option<f64>,
    pub retrain_prior: f64,
    pub fine_tune_epochs: usize,
    pub full_epochs: usize,
    /// Images requested when conceiving a dataset.
    pub conception_size: usize,
    /// Conception is offered only when at least this many images are available.
    pub min_conception_pool: usize,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            neighbours: 5,
            tau: None,
            retrain_prior: 0.5,
            fine_tune_epochs: 5,
            full_epochs: 30,
            conception_size: 256,
            min_conception_pool: 32,
        }
    }
}

/// A plan before scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub kind: PlanKind,
    pub source_model: Option<String>,
    pub source_datasets: Vec<DatasetRef>,
    /// In `[0, 1]`: `exp(-d/tau)` or the metadata affinity.
    pub similarity: f64,
    /// Known performance of the source model mapped to a non-negative utility.
    pub utility: Option<f64>,
    pub distance: Option<f64>,
    pub estimated_cost: usize,
}

pub trait Scorer: Send + Sync {
    fn score(&self, c: &Candidate) -> f64;
}

/// `similarity * utility` for model candidates, a fixed prior for
/// retraining and `prior * similarity` for conception.
#[derive(Clone, Copy, Debug)]
pub struct BaselineScorer {
    pub retrain_prior: f64,
}

impl Scorer for BaselineScorer {
    fn score(&self, c: &Candidate) -> f64 {
        match c.kind {
            PlanKind::Reuse | PlanKind::FineTune => c.similarity * c.utility.unwrap_or(0.0),
            PlanKind::DatasetConception => self.retrain_prior * c.similarity,
            PlanKind::Retrain => self.retrain_prior,
        }
    }
}

/// Maps a metric onto a non-negative "higher is better" utility. Accuracy
/// and macro-F1 already are; negative MSE goes through `exp`.
pub fn utility(metric: MetricName, value: f64) -> f64 {
    match metric {
        MetricName::Accuracy | MetricName::MacroF1 => value.max(0.0),
        MetricName::NegMse => value.exp(),
    }
}

/// Median distance over all pairs; `None` with fewer than two points or a
/// zero median.
pub fn median_pairwise_distance(embeddings: &[&DatasetEmbedding]) -> Result<Option<f64>> {
    let mut d = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            d.push(similarity(embeddings[i], embeddings[j])?);
        }
    }
    if d.is_empty() {
        return Ok(None);
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    Ok((med > 0.0 && med.is_finite()).then_some(med))
}

/// Images available for conceiving a dataset, summarized.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptionPool {
    pub sources: Vec<DatasetRef>,
    pub count: usize,
    pub mean_distance: f64,
}

impl ConceptionPool {
    pub fn from_refs(refs: &[ImageRef]) -> Option<Self> {
        if refs.is_empty() {
            return None;
        }
        let sources: BTreeSet<DatasetRef> = refs
            .iter()
            .map(|r| DatasetRef { dataset_id: r.dataset_id.clone(), version: r.version })
            .collect();
        Some(ConceptionPool {
            sources: sources.into_iter().collect(),
            count: refs.len(),
            mean_distance: refs.iter().map(|r| r.distance).sum::<f64>() / refs.len() as f64,
        })
    }
}

/// Store contents the ranking depends on.
#[derive(Clone, Debug, Default)]
pub struct Snapshot {
    pub datasets: Vec<DatasetRecord>,
    pub models: Vec<ModelRecord>,
    pub conception: Option<ConceptionPool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Fingerprints,
    MetadataOnly,
}

/// The total order on plans: score descending, cost ascending, kind order,
/// then source datasets and model ids.
pub fn plan_order(a: &StrategyPlan, b: &StrategyPlan) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.estimated_cost.cmp(&b.estimated_cost))
        .then(a.kind.cmp(&b.kind))
        .then_with(|| a.source_datasets.cmp(&b.source_datasets))
        .then_with(|| a.source_model.cmp(&b.source_model))
}

fn model_kind_for(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Classification => CLASSIFIER_KIND,
        TaskKind::Reconstruction => crate::embedder::CHECKPOINT_KIND,
    }
}

/// Whether `model` can be served for `task` unchanged.
fn reusable(model: &ModelRecord, task: &TaskSpec, task_ds: &DatasetRecord, source: &DatasetRecord) -> bool {
    if model.architecture.kind != model_kind_for(task.task_kind) {
        return false;
    }
    match task.task_kind {
        TaskKind::Classification => source.class_labels == task_ds.class_labels,
        TaskKind::Reconstruction => true,
    }
}

/// The source's best known model for the task metric (ties to the smaller id).
fn best_known<'a>(
    source: &DatasetRecord,
    metric: MetricName,
    models: &'a BTreeMap<&str, &ModelRecord>,
) -> Option<(&'a ModelRecord, f64)> {
    let mut best: Option<(&ModelRecord, f64)> = None;
    for p in &source.known_performances {
        if p.metric_name != metric || !p.value.is_finite() {
            continue;
        }
        let Some(&m) = models.get(p.model_id.as_str()) else { continue };
        let better = match best {
            None => true,
            Some((bm, bv)) => p.value > bv || (p.value == bv && m.model_id < bm.model_id),
        };
        if better {
            best = Some((m, p.value));
        }
    }
    best
}

/// Ranks plans from a snapshot. The task's dataset must be in the snapshot.
pub fn rank_snapshot(
    snap: &Snapshot,
    task: &TaskSpec,
    k: usize,
    mode: Mode,
    cfg: &StrategyConfig,
    scorer: &dyn Scorer,
) -> Result<Vec<StrategyPlan>> {
    if k < 1 {
        return Err(Error::validation("k must be at least 1"));
    }
    let task_ds = snap
        .datasets
        .iter()
        .find(|r| r.dataset_id == task.dataset_id && r.version == task.dataset_version)
        .ok_or_else(|| Error::not_found(format!("dataset {}@v{}", task.dataset_id, task.dataset_version)))?;
    let others: Vec<&DatasetRecord> = snap
        .datasets
        .iter()
        .filter(|r| !(r.dataset_id == task_ds.dataset_id && r.version == task_ds.version))
        .collect();
    let models: BTreeMap<&str, &ModelRecord> = snap.models.iter().map(|m| (m.model_id.as_str(), m)).collect();

    // (record, similarity weight, distance) of the m nearest sources.
    let mut near: Vec<(&DatasetRecord, f64, Option<f64>)> = Vec::new();
    let mut tau = 1.0;
    match mode {
        Mode::Fingerprints => {
            let fp = task_ds
                .fingerprint_ref
                .as_ref()
                .ok_or_else(|| Error::validation(format!("dataset {} has no fingerprints", task_ds.key())))?;
            let query = &fp.embedding;
            let version = &fp.embedder_version;
            tau = match cfg.tau {
                Some(t) if t > 0.0 && t.is_finite() => t,
                Some(t) => return Err(Error::validation(format!("tau must be positive, got {t}"))),
                None => {
                    let all: Vec<&DatasetEmbedding> = snap.datasets.iter().filter_map(|r| r.embedding_for(version)).collect();
                    median_pairwise_distance(&all)?.unwrap_or(1.0)
                }
            };
            let mut scored = Vec::new();
            for r in &others {
                if let Some(e) = r.embedding_for(version) {
                    scored.push((*r, similarity(query, e)?));
                }
            }
            scored.sort_by(|(a, da), (b, db)| {
                da.total_cmp(db)
                    .then(a.version.cmp(&b.version))
                    .then_with(|| a.dataset_id.cmp(&b.dataset_id))
            });
            scored.truncate(cfg.neighbours);
            near = scored.into_iter().map(|(r, d)| (r, (-d / tau).exp(), Some(d))).collect();
        }
        Mode::MetadataOnly => {
            let mut scored: Vec<(&DatasetRecord, f64)> =
                others.iter().map(|r| (*r, metadata_affinity(task.task_kind, task_ds, r))).collect();
            scored.sort_by(|(a, sa), (b, sb)| {
                sb.total_cmp(sa)
                    .then(a.version.cmp(&b.version))
                    .then_with(|| a.dataset_id.cmp(&b.dataset_id))
            });
            scored.truncate(cfg.neighbours);
            near.extend(scored.into_iter().map(|(r, s)| (r, s, None)));
        }
    }

    let mut candidates = Vec::new();
    for &(src, sim, dist) in &near {
        let Some((model, value)) = best_known(src, task.metric_name, &models) else { continue };
        let base = Candidate {
            kind: PlanKind::FineTune,
            source_model: Some(model.model_id.clone()),
            source_datasets: vec![DatasetRef::of(src)],
            similarity: sim,
            utility: Some(utility(task.metric_name, value)),
            distance: dist,
            estimated_cost: cfg.fine_tune_epochs,
        };
        if reusable(model, task, task_ds, src) {
            candidates.push(Candidate { kind: PlanKind::Reuse, estimated_cost: 0, ..base.clone() });
        }
        candidates.push(base);
    }
    candidates.push(Candidate {
        kind: PlanKind::Retrain,
        source_model: None,
        source_datasets: vec![],
        similarity: 0.0,
        utility: None,
        distance: None,
        estimated_cost: cfg.full_epochs,
    });
    if mode == Mode::Fingerprints {
        if let Some(pool) = snap.conception.as_ref().filter(|p| p.count >= cfg.min_conception_pool.max(1)) {
            candidates.push(Candidate {
                kind: PlanKind::DatasetConception,
                source_model: None,
                source_datasets: pool.sources.clone(),
                similarity: (-pool.mean_distance / tau).exp(),
                utility: None,
                distance: Some(pool.mean_distance),
                estimated_cost: cfg.full_epochs,
            });
        }
    }

    let fingerprint_based = mode == Mode::Fingerprints;
    let mut plans: Vec<StrategyPlan> = candidates
        .into_iter()
        .map(|c| {
            let score = scorer.score(&c);
            StrategyPlan {
                rationale: rationale(&c, task.metric_name, tau, fingerprint_based),
                kind: c.kind,
                source_model: c.source_model,
                source_datasets: c.source_datasets,
                estimated_cost: c.estimated_cost,
                score,
                fingerprint_based,
            }
        })
        .collect();
    plans.sort_by(plan_order);
    plans.truncate(k);
    Ok(plans)
}

fn rationale(c: &Candidate, metric: MetricName, tau: f64, fingerprints: bool) -> String {
    let sources = c.source_datasets.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ");
    let closeness = match (fingerprints, c.distance) {
        (true, Some(d)) => format!("distance {d:.4}, tau {tau:.4}, weight {:.4}", c.similarity),
        _ => format!("metadata affinity {:.4}", c.similarity),
    };
    match c.kind {
        PlanKind::Reuse | PlanKind::FineTune => format!(
            "{} {} (best {metric} utility {:.4} on {sources}; {closeness})",
            c.kind,
            c.source_model.as_deref().unwrap_or("?"),
            c.utility.unwrap_or(0.0)
        ),
        PlanKind::DatasetConception => format!("conceive a training set from {sources} ({closeness})"),
        PlanKind::Retrain => "train from scratch (fixed prior)".to_string(),
    }
}

/// Store-backed ranking and dataset conception.
pub struct Strategist<'a> {
    pub datasets: &'a DatasetStore,
    pub models: &'a ModelStore,
    pub config: StrategyConfig,
    scorer: Box<dyn Scorer>,
}

impl<'a> Strategist<'a> {
    pub fn new(datasets: &'a DatasetStore, models: &'a ModelStore, config: StrategyConfig) -> Self {
        let scorer = Box::new(BaselineScorer { retrain_prior: config.retrain_prior });
        Strategist { datasets, models, config, scorer }
    }

    pub fn with_scorer(mut self, scorer: Box<dyn Scorer>) -> Self {
        self.scorer = scorer;
        self
    }

    fn task_record(&self, task: &TaskSpec) -> Result<DatasetRecord> {
        self.datasets.get(&task.dataset_id, Some(task.dataset_version))
    }

    /// The images a conceived dataset would be built from.
    pub fn conception_refs(&self, task: &TaskSpec, n: usize, stratify: bool) -> Result<Vec<ImageRef>> {
        let rec = self.task_record(task)?;
        let fp = rec
            .fingerprint_ref
            .as_ref()
            .ok_or_else(|| Error::validation(format!("dataset {} has no fingerprints", rec.key())))?;
        self.datasets.nearest_images(&fp.embedding, n, stratify, Some(&task.dataset_id))
    }

    pub fn snapshot(&self, task: &TaskSpec, mode: Mode) -> Result<Snapshot> {
        let conception = match mode {
            Mode::Fingerprints => {
                ConceptionPool::from_refs(&self.conception_refs(task, self.config.conception_size, false)?)
            }
            Mode::MetadataOnly => None,
        };
        Ok(Snapshot { datasets: self.datasets.list()?, models: self.models.models()?, conception })
    }

    pub fn rank_strategies(&self, task: &TaskSpec, k: usize, use_fingerprints: bool) -> Result<Vec<StrategyPlan>> {
        let mode = if use_fingerprints { Mode::Fingerprints } else { Mode::MetadataOnly };
        if k < 1 {
            return Err(Error::validation("k must be at least 1"));
        }
        let snap = self.snapshot(task, mode)?;
        rank_snapshot(&snap, task, k, mode, &self.config, self.scorer.as_ref())
    }

    pub fn rank_strategies_metadata_only(&self, task: &TaskSpec, k: usize) -> Result<Vec<StrategyPlan>> {
        self.rank_strategies(task, k, false)
    }

    /// Registers the `n` nearest stored images as a new dataset version.
    /// Labels are mapped onto the task's class names; other classes become
    /// unlabeled.
    pub fn conceive_dataset(&self, task: &TaskSpec, n: usize, stratify: bool) -> Result<DatasetRecord> {
        if n == 0 {
            return Err(Error::validation("cannot conceive an empty dataset"));
        }
        let rec = self.task_record(task)?;
        let refs = self.conception_refs(task, n, stratify)?;
        if refs.is_empty() {
            return Err(Error::validation("no fingerprinted images to conceive a dataset from"));
        }
        let (pixels, _, names) = self.datasets.gather_images(&refs)?;
        let labels: Vec<u16> = names
            .iter()
            .map(|name| rec.class_labels.iter().position(|c| c == name).map_or(UNLABELED, |i| i as u16))
            .collect();
        let container = ImageContainer::new(
            &format!("{}-conceived", rec.dataset_id),
            pixels,
            labels,
            &[("train", refs.len())],
            rec.class_labels.clone(),
        )?;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for r in &refs {
            *counts.entry(format!("{}@v{}", r.dataset_id, r.version)).or_default() += 1;
        }
        let note = format!(
            "conceived for {} from {}",
            task.task_id,
            counts.iter().map(|(k, v)| format!("{k} ({v} images)")).collect::<Vec<_>>().join(", ")
        );
        let (record, _) = self.datasets.register(&container, &container.manifest.name, task.task_kind, &note)?;
        Ok(record)
    }
}
