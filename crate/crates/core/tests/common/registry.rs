//! In-memory registries and a brute-force enumerate-and-sort ranking oracle.

use std::collections::{BTreeMap, BTreeSet};

use chrono::Utc;
use rand::seq::SliceRandom;
use rand::Rng as _;
use scarceops::dataset::{DatasetRecord, FingerprintRef, KnownPerformance, SplitRange};
use scarceops::embedder::DatasetEmbedding;
use scarceops::metrics::{MetricName, TaskKind};
use scarceops::models::{Architecture, MetricValue, ModelRecord, TaskSpec};
use scarceops::nn::arch::Preset;
use scarceops::rng::Rng;
use scarceops::strategy::{rank_snapshot, BaselineScorer, ConceptionPool, DatasetRef, Mode, PlanKind, Snapshot, StrategyConfig, StrategyPlan};

pub fn embedding(point: &[f64], version: &str) -> DatasetEmbedding {
    DatasetEmbedding {
        mean_vector: point.to_vec(),
        per_split: BTreeMap::new(),
        split_counts: BTreeMap::new(),
        count: 1,
        embedder_version: version.into(),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn record(
    id: &str,
    version: u32,
    kind: TaskKind,
    classes: &[&str],
    counts: &[usize],
    point: Option<(&[f64], &str)>,
    perfs: Vec<KnownPerformance>,
) -> DatasetRecord {
    let dist: BTreeMap<String, usize> = counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(i, &n)| (i.to_string(), n))
        .collect();
    let total: usize = counts.iter().sum();
    let fp = point.map(|(p, v)| FingerprintRef {
        embedder_version: v.into(),
        embedding: embedding(p, v),
        file: format!("fingerprints/{v}.json"),
        attached_at: Utc::now(),
    });
    DatasetRecord {
        dataset_id: id.into(),
        version,
        content_hash: format!("{id}{version}"),
        name: id.into(),
        task_kind: kind,
        class_labels: classes.iter().map(|s| s.to_string()).collect(),
        class_distribution: BTreeMap::from([("train".to_string(), dist)]),
        split_index: vec![SplitRange { name: "train".into(), start: 0, end: total }],
        image_count: total,
        fingerprint_history: fp.iter().cloned().collect(),
        fingerprint_ref: fp,
        known_performances: perfs,
        created_at: Utc::now(),
        source_note: String::new(),
    }
}

pub fn model(id: &str, kind: &str) -> ModelRecord {
    ModelRecord {
        model_id: id.into(),
        architecture: Architecture { kind: kind.into(), preset: Preset::Tiny, config: serde_json::json!({}) },
        checkpoint_hash: format!("hash-{id}"),
        run_id: format!("run-for-{id}"),
        task_id: "task-000000".into(),
        known_performances: vec![],
        created_at: Utc::now(),
    }
}

pub fn task(id: &str, version: u32, metric: MetricName, kind: TaskKind) -> TaskSpec {
    TaskSpec {
        task_id: "task-000001".into(),
        dataset_id: id.into(),
        dataset_version: version,
        metric_name: metric,
        task_kind: kind,
        current_best_metric: MetricValue::NEG_INFINITY,
        best_model_id: None,
        created_at: Utc::now(),
    }
}

pub struct RandomCase {
    pub snap: Snapshot,
    pub task: TaskSpec,
    pub cfg: StrategyConfig,
    pub k: usize,
}

/// Ten datasets with random metadata, 2-d embeddings, models and known
/// performances; the first dataset carries the task.
pub fn random_case(rng: &mut Rng) -> RandomCase {
    let names = ["a", "b", "c", "d"];
    let kinds = [TaskKind::Classification, TaskKind::Reconstruction];
    let task_kind = *kinds.choose(rng).unwrap();
    let metric = match task_kind {
        TaskKind::Classification => *[MetricName::Accuracy, MetricName::MacroF1].choose(rng).unwrap(),
        TaskKind::Reconstruction => MetricName::NegMse,
    };
    let models: Vec<ModelRecord> = (0..6)
        .map(|i| model(&format!("model-{i:06}"), if rng.gen_bool(0.6) { "classifier" } else { "autoencoder" }))
        .collect();
    let mut datasets = Vec::new();
    for i in 0..10 {
        let ncls = rng.gen_range(1..=3);
        let classes: Vec<&str> = if rng.gen_bool(0.5) {
            names[..ncls].to_vec()
        } else {
            let mut c: Vec<&str> = names.to_vec();
            c.shuffle(rng);
            c.truncate(ncls);
            c
        };
        let counts: Vec<usize> = (0..ncls).map(|_| rng.gen_range(0..5)).collect();
        // Coarse coordinates so distance ties happen.
        let point = [rng.gen_range(0..5) as f64 * 0.5, rng.gen_range(0..5) as f64 * 0.5];
        let version = if i == 0 || rng.gen_bool(0.85) { "e" } else { "other" };
        let with_fp = i == 0 || rng.gen_bool(0.9);
        let perfs = (0..rng.gen_range(0..3))
            .map(|_| {
                let m = *[MetricName::Accuracy, MetricName::MacroF1, MetricName::NegMse].choose(rng).unwrap();
                let value = match m {
                    MetricName::NegMse => -rng.gen_range(0..8) as f64 * 0.01,
                    _ => rng.gen_range(0..10) as f64 * 0.1,
                };
                KnownPerformance { model_id: models.choose(rng).unwrap().model_id.clone(), metric_name: m, value }
            })
            .collect();
        let kind = if i == 0 { task_kind } else { *kinds.choose(rng).unwrap() };
        datasets.push(record(
            &format!("ds{i:02}"),
            rng.gen_range(1..3),
            kind,
            &classes,
            &counts,
            with_fp.then_some((&point[..], version)),
            perfs,
        ));
    }
    let conception = rng.gen_bool(0.5).then(|| ConceptionPool {
        sources: vec![DatasetRef { dataset_id: "ds03".into(), version: 1 }],
        count: rng.gen_range(0..100),
        mean_distance: rng.gen_range(0.0..2.0),
    });
    let cfg = StrategyConfig {
        neighbours: rng.gen_range(1..7),
        tau: if rng.gen_bool(0.5) { None } else { Some(rng.gen_range(0.1..3.0)) },
        ..StrategyConfig::default()
    };
    let task = task("ds00", datasets[0].version, metric, task_kind);
    RandomCase { snap: Snapshot { datasets, models, conception }, task, cfg, k: rng.gen_range(1..16) }
}

/// Plans reduced to comparable tuples.
pub type Key = (PlanKind, Option<String>, Vec<DatasetRef>, usize, f64);

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn shares(r: &DatasetRecord) -> BTreeMap<String, f64> {
    let mut by_name: BTreeMap<String, f64> = BTreeMap::new();
    let mut total = 0.0;
    for split in r.class_distribution.values() {
        for (label, &n) in split {
            let name = r.class_labels[label.parse::<usize>().unwrap()].clone();
            *by_name.entry(name).or_default() += n as f64;
            total += n as f64;
        }
    }
    by_name.into_iter().map(|(k, v)| (k, v / total)).collect()
}

pub fn oracle_affinity(kind: TaskKind, t: &DatasetRecord, o: &DatasetRecord) -> f64 {
    let a: BTreeSet<_> = t.class_labels.iter().collect();
    let b: BTreeSet<_> = o.class_labels.iter().collect();
    let inter = a.iter().filter(|x| b.contains(*x)).count() as f64;
    let uni = a.len() as f64 + b.len() as f64 - inter;
    let (p, q) = (shares(t), shares(o));
    let mut l1 = 0.0;
    for name in ["a", "b", "c", "d"] {
        l1 += (p.get(name).unwrap_or(&0.0) - q.get(name).unwrap_or(&0.0)).abs();
    }
    let overlap = if p.is_empty() || q.is_empty() { 0.0 } else { 1.0 - 0.5 * l1 };
    ((o.task_kind == kind) as u8 as f64 + if uni > 0.0 { inter / uni } else { 0.0 } + overlap) / 3.0
}

/// Enumerates every candidate, scores it and sorts the whole list.
pub fn oracle_rank(case: &RandomCase, mode: Mode) -> Vec<Key> {
    let RandomCase { snap, task, cfg, k } = case;
    let t = snap
        .datasets
        .iter()
        .find(|r| r.dataset_id == task.dataset_id && r.version == task.dataset_version)
        .unwrap();
    let models: BTreeMap<&str, &ModelRecord> = snap.models.iter().map(|m| (m.model_id.as_str(), m)).collect();
    let mut tau = 1.0;
    let mut neighbours: Vec<(f64, u32, String, f64)> = Vec::new(); // (sort key, version, id, weight)
    match mode {
        Mode::Fingerprints => {
            let fp = t.fingerprint_ref.as_ref().unwrap();
            let v = &fp.embedder_version;
            let pts: Vec<&Vec<f64>> = snap
                .datasets
                .iter()
                .filter_map(|r| r.fingerprint_history.iter().rev().find(|f| &f.embedder_version == v))
                .map(|f| &f.embedding.mean_vector)
                .collect();
            let mut pair = vec![];
            for i in 0..pts.len() {
                for j in 0..i {
                    pair.push(dist(pts[i], pts[j]));
                }
            }
            pair.sort_by(|a, b| a.partial_cmp(b).unwrap());
            tau = match cfg.tau {
                Some(x) => x,
                None if pair.is_empty() => 1.0,
                None => {
                    let m = pair.len();
                    let med = if m % 2 == 1 { pair[m / 2] } else { (pair[m / 2 - 1] + pair[m / 2]) / 2.0 };
                    if med > 0.0 { med } else { 1.0 }
                }
            };
            for r in &snap.datasets {
                if r.dataset_id == t.dataset_id && r.version == t.version {
                    continue;
                }
                if let Some(f) = r.fingerprint_history.iter().rev().find(|f| &f.embedder_version == v) {
                    let d = dist(&fp.embedding.mean_vector, &f.embedding.mean_vector);
                    neighbours.push((d, r.version, r.dataset_id.clone(), (-d / tau).exp()));
                }
            }
        }
        Mode::MetadataOnly => {
            for r in &snap.datasets {
                if r.dataset_id == t.dataset_id && r.version == t.version {
                    continue;
                }
                let a = oracle_affinity(task.task_kind, t, r);
                neighbours.push((-a, r.version, r.dataset_id.clone(), a));
            }
        }
    }
    neighbours.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    neighbours.truncate(cfg.neighbours);

    let util = |v: f64| match task.metric_name {
        MetricName::NegMse => v.exp(),
        _ => v.max(0.0),
    };
    let want_kind = match task.task_kind {
        TaskKind::Classification => "classifier",
        TaskKind::Reconstruction => "autoencoder",
    };
    let mut all: Vec<Key> = vec![];
    for (_, version, id, w) in &neighbours {
        let src = snap.datasets.iter().find(|r| &r.dataset_id == id && r.version == *version).unwrap();
        let mut best: Option<(String, f64)> = None;
        for p in &src.known_performances {
            if p.metric_name != task.metric_name || !models.contains_key(p.model_id.as_str()) {
                continue;
            }
            best = match best {
                Some((bid, bv)) if bv > p.value || (bv == p.value && bid < p.model_id) => Some((bid, bv)),
                _ => Some((p.model_id.clone(), p.value)),
            };
        }
        let Some((mid, v)) = best else { continue };
        let s = w * util(v);
        let src_ref = vec![DatasetRef { dataset_id: id.clone(), version: *version }];
        let same_classes = task.task_kind == TaskKind::Reconstruction || src.class_labels == t.class_labels;
        if models[mid.as_str()].architecture.kind == want_kind && same_classes {
            all.push((PlanKind::Reuse, Some(mid.clone()), src_ref.clone(), 0, s));
        }
        all.push((PlanKind::FineTune, Some(mid), src_ref, cfg.fine_tune_epochs, s));
    }
    all.push((PlanKind::Retrain, None, vec![], cfg.full_epochs, cfg.retrain_prior));
    if mode == Mode::Fingerprints {
        if let Some(pool) = &snap.conception {
            if pool.count >= cfg.min_conception_pool {
                let s = cfg.retrain_prior * (-pool.mean_distance / tau).exp();
                all.push((PlanKind::DatasetConception, None, pool.sources.clone(), cfg.full_epochs, s));
            }
        }
    }
    all.sort_by(|a, b| {
        b.4.partial_cmp(&a.4)
            .unwrap()
            .then(a.3.cmp(&b.3))
            .then(a.0.cmp(&b.0))
            .then(a.2.cmp(&b.2))
            .then(a.1.cmp(&b.1))
    });
    all.truncate(*k);
    all
}

pub fn rank(case: &RandomCase, mode: Mode) -> Vec<StrategyPlan> {
    let scorer = BaselineScorer { retrain_prior: case.cfg.retrain_prior };
    rank_snapshot(&case.snap, &case.task, case.k, mode, &case.cfg, &scorer).unwrap()
}

pub fn keys(plans: &[StrategyPlan]) -> Vec<Key> {
    plans
        .iter()
        .map(|p| (p.kind, p.source_model.clone(), p.source_datasets.clone(), p.estimated_cost, p.score))
        .collect()
}

pub fn close(a: &[Key], b: &[Key]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| x.0 == y.0 && x.1 == y.1 && x.2 == y.2 && x.3 == y.3 && (x.4 - y.4).abs() <= 1e-12)
}

/// `case` with every distance and tau multiplied by `c`.
pub fn scaled(case: &RandomCase, c: f64) -> RandomCase {
    let mut snap = case.snap.clone();
    for r in &mut snap.datasets {
        for f in r.fingerprint_ref.iter_mut().chain(r.fingerprint_history.iter_mut()) {
            f.embedding.mean_vector.iter_mut().for_each(|x| *x *= c);
        }
    }
    if let Some(p) = &mut snap.conception {
        p.mean_distance *= c;
    }
    let mut cfg = case.cfg.clone();
    cfg.tau = cfg.tau.map(|t| t * c);
    RandomCase { snap, task: case.task.clone(), cfg, k: case.k }
}
