use std::path::Path;

use scarceops::automl::{AutoMl, AutoMlConfig, SearchSpace, SearchStrategy, TrialParams};
use scarceops::dataset::{DatasetStore, ImageContainer, IMAGE_BYTES};
use scarceops::embedder::{DatasetEmbedding, Fingerprint};
use scarceops::metrics::{MetricName, TaskKind};
use scarceops::models::{compare_runs, ModelStore, RunRecord, RunStatus};
use scarceops::strategy::{PlanKind, StrategyPlan};
use scarceops::synthetic::{generate, Family};
use scarceops::Error;

struct Env {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    ds: DatasetStore,
    ms: ModelStore,
}

fn open(root: &Path) -> (DatasetStore, ModelStore) {
    (DatasetStore::open(&root.join("datasets")).unwrap(), ModelStore::open(&root.join("models")).unwrap())
}

/// Registers a two-class blob dataset with stand-in fingerprints.
fn add_dataset(ds: &DatasetStore, name: &str, seed: u64, offset: f32) {
    let set = generate(Family::BrightBlobs, 32, 2, seed);
    let c = ImageContainer::new(name, set.pixels.clone(), set.labels.clone(), &[("train", 24), ("val", 8)], vec!["q0".into(), "q1".into()]).unwrap();
    let (r, _) = ds.register(&c, name, TaskKind::Classification, "").unwrap();
    let fps: Vec<Fingerprint> = (0..32)
        .map(|i| {
            let px = &set.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES];
            let mean = px.iter().map(|&p| p as f32).sum::<f32>() / IMAGE_BYTES as f32 / 255.0;
            Fingerprint { vector: vec![mean + offset, set.labels[i] as f32], source_image_id: r.image_id(i), embedder_version: "stand-in".into() }
        })
        .collect();
    let e = DatasetEmbedding::from_fingerprints(&fps, &[("train".into(), 0..24), ("val".into(), 24..32)]).unwrap();
    ds.attach_fingerprints(&r.dataset_id, r.version, &fps, &e).unwrap();
}

fn env() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let (ds, ms) = open(&root);
    add_dataset(&ds, "blobs", 1, 0.0);
    Env { _dir: dir, root, ds, ms }
}

fn space(trials: usize, seed: u64) -> SearchSpace {
    SearchSpace { trials, full_epochs: 2, fine_tune_epochs: 1, seed, learning_rate: (1e-3, 5e-3), ..SearchSpace::default() }
}

fn plan(kind: PlanKind, source_model: Option<&str>) -> StrategyPlan {
    StrategyPlan {
        kind,
        source_model: source_model.map(String::from),
        source_datasets: vec![],
        estimated_cost: 0,
        score: 0.5,
        rationale: "test".into(),
        fingerprint_based: false,
    }
}

fn automl(e: &Env) -> AutoMl<'_> {
    AutoMl::new(&e.ds, &e.ms, AutoMlConfig::default())
}

#[test]
fn retrain_records_every_trial() {
    let e = env();
    let task = e.ms.create_task("blobs", 1, MetricName::Accuracy, TaskKind::Classification).unwrap();
    let out = automl(&e).execute(&plan(PlanKind::Retrain, None), &task, &space(3, 5)).unwrap();
    assert_eq!(out.run_ids.len(), 3);
    assert_eq!(e.ms.runs().unwrap().len(), 3);
    for id in &out.run_ids {
        let r = e.ms.run(id).unwrap();
        assert!(matches!(r.status, RunStatus::Succeeded | RunStatus::Failed));
        assert_eq!(r.strategy_plan.as_ref().unwrap()["kind"], "retrain");
        assert!(r.hyperparameters.contains_key("learning_rate"));
    }
    let best = out.best.unwrap();
    assert_eq!(best.epochs_trained, 2);
    assert_eq!(best.loss_history.len(), 2);
    let runs: Vec<RunRecord> = out.run_ids.iter().map(|id| e.ms.run(id).unwrap()).collect();
    assert!(runs.iter().all(|r| r.status != RunStatus::Succeeded || compare_runs(&best, r).is_le()));
}

#[test]
fn same_seed_replays_hyperparameters_and_weights() {
    let run_once = || {
        let e = env();
        let task = e.ms.create_task("blobs", 1, MetricName::Accuracy, TaskKind::Classification).unwrap();
        let out = automl(&e).execute(&plan(PlanKind::Retrain, None), &task, &space(3, 42)).unwrap();
        out.run_ids
            .iter()
            .map(|id| {
                let r = e.ms.run(id).unwrap();
                (r.hyperparameters, r.checkpoint_hash, r.metric_value)
            })
            .collect::<Vec<_>>()
    };
    let a = run_once();
    assert_eq!(a, run_once());
    let lrs: Vec<_> = a.iter().map(|(h, _, _)| h["learning_rate"].as_f64().unwrap()).collect();
    assert!(lrs.iter().all(|&lr| (1e-3..=5e-3).contains(&lr)));
    assert!(lrs[0] != lrs[1] || lrs[1] != lrs[2]);
}

#[test]
fn reuse_is_a_single_evaluation_run() {
    let e = env();
    let task = e.ms.create_task("blobs", 1, MetricName::Accuracy, TaskKind::Classification).unwrap();
    let am = automl(&e);
    let trained = am.execute(&plan(PlanKind::Retrain, None), &task, &space(1, 1)).unwrap().best.unwrap();
    let model = e.ms.models().unwrap().into_iter().find(|m| m.run_id == trained.run_id).unwrap();
    let before = e.ms.runs().unwrap().len();
    let out = am.execute(&plan(PlanKind::Reuse, Some(&model.model_id)), &task, &space(8, 1)).unwrap();
    assert_eq!(out.run_ids.len(), 1);
    assert_eq!(e.ms.runs().unwrap().len(), before + 1);
    let r = out.best.unwrap();
    assert_eq!(r.status, RunStatus::Succeeded);
    assert_eq!(r.epochs_trained, 0);
    assert_eq!(r.checkpoint_hash, trained.checkpoint_hash);
    assert_eq!(r.metric_value, trained.metric_value);
}

#[test]
fn missing_source_fails_every_trial_but_records_them() {
    let e = env();
    let task = e.ms.create_task("blobs", 1, MetricName::Accuracy, TaskKind::Classification).unwrap();
    let out = automl(&e).execute(&plan(PlanKind::FineTune, Some("model-999999")), &task, &space(2, 1)).unwrap();
    assert!(out.best.is_none());
    assert_eq!(out.run_ids.len(), 2);
    for id in &out.run_ids {
        let r = e.ms.run(id).unwrap();
        assert_eq!(r.status, RunStatus::Failed);
        assert!(r.failure_reason.unwrap().contains("model-999999"));
    }
}

#[test]
fn panics_and_divergence_are_recorded_as_failures() {
    let e = env();
    let task = e.ms.create_task("blobs", 1, MetricName::Accuracy, TaskKind::Classification).unwrap();
    let am = automl(&e).with_trial_hook(Box::new(|p: &TrialParams| {
        if p.trial == 1 {
            panic!("worker crashed in trial {}", p.trial);
        }
    }));
    let out = am.execute(&plan(PlanKind::Retrain, None), &task, &space(3, 2)).unwrap();
    let statuses: Vec<RunStatus> = out.run_ids.iter().map(|id| e.ms.run(id).unwrap().status).collect();
    assert_eq!(statuses, vec![RunStatus::Succeeded, RunStatus::Failed, RunStatus::Succeeded]);
    let reason = e.ms.run(&out.run_ids[1]).unwrap().failure_reason.unwrap();
    assert!(reason.contains("panic") && reason.contains("trial 1"), "{reason}");

    struct Wild;
    impl SearchStrategy for Wild {
        fn sample(&self, _: &SearchSpace, trial: usize, epochs: usize) -> TrialParams {
            TrialParams { trial, learning_rate: 1e12, batch_size: 8, epochs, seed: 3 }
        }
    }
    let out = automl(&e).with_search(Box::new(Wild)).execute(&plan(PlanKind::Retrain, None), &task, &space(1, 0)).unwrap();
    let r = e.ms.run(&out.run_ids[0]).unwrap();
    assert_eq!(r.status, RunStatus::Failed, "{r:?}");
}

#[test]
fn develop_updates_a_t_and_conserves_runs() {
    let e = env();
    let task = e.ms.create_task("blobs", 1, MetricName::Accuracy, TaskKind::Classification).unwrap();
    let am = automl(&e);
    let report = am.develop(&task.task_id, 1, &space(2, 3)).unwrap();
    assert_eq!(report.plans.len(), 1);
    assert_eq!(report.plans[0].kind, PlanKind::Retrain);
    assert_eq!(report.run_ids().len(), 2);
    assert_eq!(e.ms.runs().unwrap().len(), 2);
    let t = e.ms.task(&task.task_id).unwrap();
    assert_eq!(t.current_best_metric, report.best_run.metric_value);
    assert_eq!(t.best_model_id.as_deref(), Some(report.best_model.model_id.as_str()));
    assert_eq!(report.current_best_metric, t.current_best_metric);

    let first = t.current_best_metric.get();
    let again = am.develop(&task.task_id, 3, &space(2, 4)).unwrap();
    let attempted: usize = again.outcomes.iter().map(|o| o.run_ids.len()).sum();
    assert_eq!(e.ms.runs().unwrap().len(), 2 + attempted);
    assert!(again.current_best_metric.get() >= first);
    assert_eq!(e.ms.task(&task.task_id).unwrap().current_best_metric, again.best_run.metric_value);
}

#[test]
fn develop_with_all_runs_failing_keeps_negative_infinity() {
    let e = env();
    let task = e.ms.create_task("blobs", 1, MetricName::Accuracy, TaskKind::Classification).unwrap();
    let am = automl(&e).with_trial_hook(Box::new(|_: &TrialParams| panic!("no compute")));
    let err = am.develop(&task.task_id, 1, &space(2, 0)).unwrap_err();
    match &err {
        Error::DevelopmentFailed { reasons, .. } => {
            assert_eq!(reasons.len(), 2);
            assert!(reasons.iter().all(|r| r.contains("no compute")));
        }
        other => panic!("unexpected {other}"),
    }
    assert!(!e.ms.task(&task.task_id).unwrap().current_best_metric.is_finite());
    assert_eq!(e.ms.runs().unwrap().len(), 2);
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

#[test]
fn develop_matches_exhaustive_execution_oracle() {
    let e = env();
    add_dataset(&e.ds, "neighbour", 2, 0.05);
    // A model with a known score on the neighbour makes reuse and fine-tune candidates.
    let am = automl(&e);
    let src_task = e.ms.create_task("neighbour", 1, MetricName::Accuracy, TaskKind::Classification).unwrap();
    am.develop(&src_task.task_id, 1, &space(1, 9)).unwrap();
    let task = e.ms.create_task("blobs", 1, MetricName::Accuracy, TaskKind::Classification).unwrap();

    let snapshot = tempfile::tempdir().unwrap();
    copy_dir(&e.root, snapshot.path());
    let sp = space(2, 11);
    let report = am.develop(&task.task_id, 10, &sp).unwrap();
    let kinds: Vec<PlanKind> = report.plans.iter().map(|p| p.kind).collect();
    assert!(kinds.contains(&PlanKind::Reuse) && kinds.contains(&PlanKind::FineTune) && kinds.contains(&PlanKind::Retrain));

    // Oracle: execute every candidate plan on an untouched copy, each from
    // the same starting state, and take the best run over all of them.
    let (ds2, ms2) = open(snapshot.path());
    let am2 = AutoMl::new(&ds2, &ms2, AutoMlConfig::default());
    let all = am2.strategist().rank_strategies(&task, usize::MAX, true).unwrap();
    assert_eq!(all, report.plans);
    let mut best: Option<RunRecord> = None;
    for p in &all {
        if let Some(r) = am2.execute(p, &task, &sp).unwrap().best {
            let better = match &best {
                None => true,
                Some(b) => (r.metric_value.get(), std::cmp::Reverse(r.epochs_trained)) > (b.metric_value.get(), std::cmp::Reverse(b.epochs_trained)),
            };
            if better {
                best = Some(r);
            }
        }
    }
    let best = best.unwrap();
    assert_eq!(best.metric_value, report.best_run.metric_value);
    assert_eq!(best.epochs_trained, report.best_run.epochs_trained);
    assert_eq!(best.checkpoint_hash, report.best_run.checkpoint_hash);
}
