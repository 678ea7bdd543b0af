use std::cmp::Ordering;

use super::{RunRecord, RunStatus};

/// Orders runs best-first: higher metric, then fewer epochs, then earlier
/// `ended_at` (missing times last), then `run_id`.
pub fn compare_runs(a: &RunRecord, b: &RunRecord) -> Ordering {
    b.metric_value
        .get()
        .total_cmp(&a.metric_value.get())
        .then(a.epochs_trained.cmp(&b.epochs_trained))
        .then_with(|| match (a.ended_at, b.ended_at) {
            (Some(x), Some(y)) => x.cmp(&y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        })
        .then_with(|| a.run_id.cmp(&b.run_id))
}

/// Argmax over succeeded runs with a finite metric.
pub fn select_best_run(runs: &[RunRecord]) -> Option<&RunRecord> {
    runs.iter()
        .filter(|r| r.status == RunStatus::Succeeded && r.metric_value.is_finite())
        .min_by(|a, b| compare_runs(a, b))
}
