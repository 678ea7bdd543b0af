//! Executes strategy plans: seeded random search, training per plan kind,
//! run recording and best-model handoff.

mod search;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetStore, ImageContainer, KnownPerformance, IMAGE_BYTES};
use crate::embedder::normalize_pixels;
use crate::error::{Error, Result};
use crate::metrics::TaskKind;
use crate::models::{evaluate_on, DatasetPerformance, MetricValue, ModelRecord, ModelStore, RunRecord, RunStatus, TaskSpec};
use crate::nn::arch::Preset;
use crate::strategy::{Mode, PlanKind, StrategyConfig, StrategyPlan, Strategist};
use crate::task_model::{labeled_subset, ModelSpec, TaskModel};
use crate::tensor::Tensor;

pub use search::{RandomSearch, SearchSpace, SearchStrategy, TrialParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoMlConfig {
    pub preset: Preset,
    /// Latent width of reconstruction models.
    pub latent_dim: usize,
    pub strategy: StrategyConfig,
}

impl Default for AutoMlConfig {
    fn default() -> Self {
        AutoMlConfig { preset: Preset::Tiny, latent_dim: 2, strategy: StrategyConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevelopmentOutcome {
    pub plan: StrategyPlan,
    pub best: Option<RunRecord>,
    pub run_ids: Vec<String>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevelopReport {
    pub task_id: String,
    pub plans: Vec<StrategyPlan>,
    pub outcomes: Vec<DevelopmentOutcome>,
    pub best_model: ModelRecord,
    pub best_run: RunRecord,
    /// `A_t` after the call.
    pub current_best_metric: MetricValue,
}

impl DevelopReport {
    pub fn run_ids(&self) -> Vec<String> {
        self.outcomes.iter().flat_map(|o| o.run_ids.iter().cloned()).collect()
    }
}

/// Training and evaluation data of a task.
struct TaskData {
    container: ImageContainer,
    train: (Tensor<f32>, Vec<usize>),
    val: Option<(Tensor<f32>, Vec<usize>)>,
    eval_split: String,
}

fn split_tensor(c: &ImageContainer, split: &str, kind: TaskKind) -> Result<(Tensor<f32>, Vec<usize>)> {
    let r = c.split(split).ok_or_else(|| Error::not_found(format!("split `{split}`")))?.range();
    let x = normalize_pixels::<f32>(&c.pixels[r.start * IMAGE_BYTES..r.end * IMAGE_BYTES], r.len())?;
    match kind {
        TaskKind::Classification => labeled_subset(&x, &c.labels[r], c.manifest.classes.len()),
        TaskKind::Reconstruction => Ok((x, Vec::new())),
    }
}

fn concat(a: &(Tensor<f32>, Vec<usize>), b: (Tensor<f32>, Vec<usize>)) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut shape = a.0.shape().to_vec();
    shape[0] += b.0.shape()[0];
    let mut data = a.0.data().to_vec();
    data.extend_from_slice(b.0.data());
    let mut labels = a.1.clone();
    labels.extend(b.1);
    Ok((Tensor::new(shape, data)?, labels))
}

pub struct AutoMl<'a> {
    pub datasets: &'a DatasetStore,
    pub models: &'a ModelStore,
    pub config: AutoMlConfig,
    search: Box<dyn SearchStrategy>,
    trial_hook: Option<TrialHook>,
}

/// Called at the start of every training trial; used for fault injection.
pub type TrialHook = Box<dyn Fn(&TrialParams) + Send + Sync>;

impl<'a> AutoMl<'a> {
    pub fn new(datasets: &'a DatasetStore, models: &'a ModelStore, config: AutoMlConfig) -> Self {
        AutoMl { datasets, models, config, search: Box::new(RandomSearch), trial_hook: None }
    }

    pub fn with_search(mut self, search: Box<dyn SearchStrategy>) -> Self {
        self.search = search;
        self
    }

    pub fn with_trial_hook(mut self, hook: TrialHook) -> Self {
        self.trial_hook = Some(hook);
        self
    }

    pub fn strategist(&self) -> Strategist<'a> {
        Strategist::new(self.datasets, self.models, self.config.strategy.clone())
    }

    fn task_data(&self, task: &TaskSpec) -> Result<TaskData> {
        let container = self.datasets.load_container(&task.dataset_id, task.dataset_version)?;
        let train_split = container.train_split();
        let eval_split = container.eval_split().to_string();
        let train = split_tensor(&container, train_split, task.task_kind)?;
        let val = if eval_split != train_split {
            Some(split_tensor(&container, &eval_split, task.task_kind)?)
        } else {
            None
        };
        Ok(TaskData { container, train, val, eval_split })
    }

    fn spec(&self, task: &TaskSpec, data: &TaskData, seed: u64) -> ModelSpec {
        ModelSpec {
            kind: task.task_kind,
            preset: self.config.preset,
            num_classes: data.container.manifest.classes.len(),
            latent_dim: self.config.latent_dim,
            seed,
        }
    }

    fn start(&self, task: &TaskSpec, plan: &StrategyPlan, params: Option<&TrialParams>) -> Result<RunRecord> {
        let mut run = RunRecord::pending(&task.task_id, task.metric_name);
        run.strategy_plan = Some(serde_json::to_value(plan)?);
        if let Some(p) = params {
            run.hyperparameters = p.to_map();
        }
        run.run_id = self.models.record_run(run.clone())?;
        run.status = RunStatus::Running;
        run.started_at = Some(Utc::now());
        self.models.record_run(run.clone())?;
        Ok(run)
    }

    fn fail(&self, mut run: RunRecord, reason: String) -> Result<RunRecord> {
        run.status = RunStatus::Failed;
        run.failure_reason = Some(if reason.trim().is_empty() { "unknown failure".into() } else { reason });
        run.ended_at = Some(Utc::now());
        self.models.record_run(run.clone())?;
        Ok(run)
    }

    /// Stores the checkpoint, closes the run as succeeded, registers the
    /// model and its performance on the task dataset.
    fn succeed(&self, mut run: RunRecord, task: &TaskSpec, net: &TaskModel, value: f64) -> Result<RunRecord> {
        let ck = net.to_checkpoint();
        self.models.put_checkpoint(&ck)?;
        run.status = RunStatus::Succeeded;
        run.metric_value = MetricValue::new(value)?;
        run.checkpoint_hash = Some(ck.content_hash().to_string());
        run.ended_at = Some(Utc::now());
        self.models.record_run(run.clone())?;
        let perf = DatasetPerformance {
            dataset_id: task.dataset_id.clone(),
            version: task.dataset_version,
            metric_name: task.metric_name,
            value: run.metric_value,
        };
        let model = self.models.register_model(&run.run_id, &ck, vec![perf])?;
        self.datasets.add_known_performance(
            &task.dataset_id,
            task.dataset_version,
            KnownPerformance { model_id: model.model_id, metric_name: task.metric_name, value },
        )?;
        Ok(run)
    }

    /// Runs `body` for an open run, recording a failure for errors and panics.
    fn guarded(
        &self,
        run: RunRecord,
        task: &TaskSpec,
        body: impl FnOnce(&mut RunRecord) -> Result<(TaskModel, f64)>,
    ) -> Result<RunRecord> {
        let mut work = run.clone();
        match catch_unwind(AssertUnwindSafe(|| body(&mut work))) {
            Ok(Ok((net, value))) if value.is_finite() => self.succeed(work, task, &net, value),
            Ok(Ok((_, value))) => self.fail(work, format!("metric evaluated to {value}")),
            Ok(Err(e)) => self.fail(work, e.to_string()),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "non-string panic payload".into());
                self.fail(run, format!("panic: {msg}"))
            }
        }
    }

    /// Executes one plan. Every attempted trial is in the model registry
    /// before this returns, whatever its outcome.
    pub fn execute(&self, plan: &StrategyPlan, task: &TaskSpec, space: &SearchSpace) -> Result<DevelopmentOutcome> {
        space.validate()?;
        let t0 = Instant::now();
        let mut runs = Vec::new();
        let data = self.task_data(task);
        if plan.kind == PlanKind::Reuse {
            let run = self.start(task, plan, None)?;
            let run = match (&data, &plan.source_model) {
                (Ok(d), Some(mid)) => self.guarded(run, task, |_| {
                    let model = self.models.model(mid)?;
                    let net = self.models.load_model(&model)?;
                    if net.task_kind() != task.task_kind {
                        return Err(Error::validation(format!("model {mid} does not solve {}", task.task_kind)));
                    }
                    let v = evaluate_on(&net, task.metric_name, &d.container, &d.eval_split)?;
                    Ok((net, v))
                })?,
                (Err(e), _) => self.fail(run, e.to_string())?,
                (_, None) => self.fail(run, "reuse plan without a source model".into())?,
            };
            runs.push(run);
        } else {
            let epochs = match plan.kind {
                PlanKind::FineTune => space.fine_tune_epochs,
                _ => space.full_epochs,
            };
            let setup = data.and_then(|d| self.prepare(plan, task, d));
            for trial in 0..space.trials {
                let params = self.search.sample(space, trial, epochs);
                let run = self.start(task, plan, Some(&params))?;
                let run = match &setup {
                    Ok((d, source)) => self.guarded(run, task, |run| {
                        if let Some(hook) = &self.trial_hook {
                            hook(&params);
                        }
                        let mut net = TaskModel::build(&self.spec(task, d, params.seed), &params.fit())?;
                        if let Some(ck) = source {
                            if net.warm_start(ck)? == 0 {
                                return Err(Error::validation("source checkpoint shares no parameters with the task model"));
                            }
                        }
                        let report = net.train(
                            (&d.train.0, &d.train.1),
                            d.val.as_ref().map(|(x, y)| (x, y.as_slice())),
                            &params.fit(),
                        )?;
                        run.loss_history = report.train_loss.clone();
                        run.epochs_trained = report.train_loss.len();
                        let v = evaluate_on(&net, task.metric_name, &d.container, &d.eval_split)?;
                        Ok((net, v))
                    })?,
                    Err(e) => self.fail(run, e.to_string())?,
                };
                runs.push(run);
            }
        }
        let best = crate::models::select_best_run(&runs).cloned();
        Ok(DevelopmentOutcome {
            plan: plan.clone(),
            best,
            run_ids: runs.into_iter().map(|r| r.run_id).collect(),
            wall_time_secs: t0.elapsed().as_secs_f64(),
        })
    }

    /// Loads the warm-start checkpoint or conceives extra training data.
    fn prepare(
        &self,
        plan: &StrategyPlan,
        task: &TaskSpec,
        mut d: TaskData,
    ) -> Result<(TaskData, Option<crate::nn::checkpoint::Checkpoint>)> {
        match plan.kind {
            PlanKind::FineTune => {
                let mid = plan
                    .source_model
                    .as_deref()
                    .ok_or_else(|| Error::validation("fine-tune plan without a source model"))?;
                let model = self.models.model(mid)?;
                let ck = self.models.load_checkpoint(&model.checkpoint_hash)?;
                Ok((d, Some(ck)))
            }
            PlanKind::DatasetConception => {
                let rec = self
                    .strategist()
                    .conceive_dataset(task, self.config.strategy.conception_size, true)?;
                let extra = self.datasets.load_container(&rec.dataset_id, rec.version)?;
                // Conceived images without a task label are of no use to a classifier.
                if let Ok(more) = split_tensor(&extra, "train", task.task_kind) {
                    d.train = concat(&d.train, more)?;
                }
                Ok((d, None))
            }
            PlanKind::Retrain | PlanKind::Reuse => Ok((d, None)),
        }
    }

    /// Ranks strategies, executes the top `k`, then selects `m*` over every
    /// succeeded run of the task and raises `A_t` to its metric.
    pub fn develop(&self, task_id: &str, k: usize, space: &SearchSpace) -> Result<DevelopReport> {
        let task = self.models.task(task_id)?;
        let record = self.datasets.get(&task.dataset_id, Some(task.dataset_version))?;
        let mode = if record.fingerprint_ref.is_some() { Mode::Fingerprints } else { Mode::MetadataOnly };
        let plans = self.strategist().rank_strategies(&task, k, mode == Mode::Fingerprints)?;
        let mut outcomes = Vec::with_capacity(plans.len());
        for plan in &plans {
            outcomes.push(self.execute(plan, &task, space)?);
        }
        let (best_model, best_run) = match self.models.select_best(task_id) {
            Ok(b) => b,
            Err(Error::NoModel(_)) => {
                let mut reasons = Vec::new();
                for id in outcomes.iter().flat_map(|o| &o.run_ids) {
                    let r = self.models.run(id)?;
                    reasons.push(format!("{id}: {}", r.failure_reason.unwrap_or_default()));
                }
                return Err(Error::DevelopmentFailed { task_id: task_id.to_string(), reasons });
            }
            Err(e) => return Err(e),
        };
        let updated = self.models.offer_best(task_id, &best_model.model_id, best_run.metric_value.get())?;
        Ok(DevelopReport {
            task_id: task_id.to_string(),
            plans,
            outcomes,
            best_model,
            best_run,
            current_best_metric: updated.current_best_metric,
        })
    }
}
