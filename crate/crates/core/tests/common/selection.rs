//! Random run sets and an exhaustive-scan oracle for best-run selection.

use chrono::{DateTime, TimeZone, Utc};
use rand::Rng as _;
use scarceops::metrics::MetricName;
use scarceops::models::{MetricValue, RunRecord, RunStatus};
use scarceops::rng::Rng;

pub fn random_runs(rng: &mut Rng, n: usize) -> Vec<RunRecord> {
    // Few distinct values so ties on every key are common.
    let metrics = [0.5, 0.6, 0.7, 0.9];
    let epochs = [0, 5, 30];
    (0..n)
        .map(|i| {
            let mut r = RunRecord::pending("task-000001", MetricName::Accuracy);
            r.run_id = format!("run-{:06}", i + 1);
            r.status = match rng.gen_range(0..6) {
                0 => RunStatus::Pending,
                1 => RunStatus::Running,
                2 => RunStatus::Failed,
                _ => RunStatus::Succeeded,
            };
            if r.status == RunStatus::Succeeded {
                r.metric_value = MetricValue::new(metrics[rng.gen_range(0..metrics.len())]).unwrap();
                r.checkpoint_hash = Some(format!("h{i}"));
            }
            if r.status == RunStatus::Failed {
                r.failure_reason = Some("boom".into());
            }
            r.epochs_trained = epochs[rng.gen_range(0..epochs.len())];
            r.ended_at = match rng.gen_range(0..4) {
                0 => None,
                k => Some(stamp(k)),
            };
            r
        })
        .collect()
}

pub fn stamp(k: i64) -> DateTime<Utc> {
    Utc.timestamp_opt(1_700_000_000 + k * 60, 0).unwrap()
}

/// True when `a` is strictly preferable to `b`.
fn beats(a: &RunRecord, b: &RunRecord) -> bool {
    let (ma, mb) = (a.metric_value.get(), b.metric_value.get());
    if ma != mb {
        return ma > mb;
    }
    if a.epochs_trained != b.epochs_trained {
        return a.epochs_trained < b.epochs_trained;
    }
    let ta = a.ended_at.map_or(i64::MAX, |t| t.timestamp());
    let tb = b.ended_at.map_or(i64::MAX, |t| t.timestamp());
    if ta != tb {
        return ta < tb;
    }
    a.run_id < b.run_id
}

/// The unique succeeded run that beats every other succeeded run.
pub fn oracle_best(runs: &[RunRecord]) -> Option<String> {
    let ok: Vec<&RunRecord> = runs.iter().filter(|r| r.status == RunStatus::Succeeded).collect();
    ok.iter()
        .find(|r| ok.iter().all(|s| s.run_id == r.run_id || beats(r, s)))
        .map(|r| r.run_id.clone())
}
