use std::collections::{BTreeMap, BTreeSet};

use crate::dataset::DatasetRecord;
use crate::metrics::TaskKind;

/// Labeled-image share per class name, pooled over splits.
pub fn class_shares(r: &DatasetRecord) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for split in r.class_distribution.values() {
        for (label, &n) in split {
            let Some(name) = label.parse::<usize>().ok().and_then(|i| r.class_labels.get(i)) else {
                continue;
            };
            *counts.entry(name.clone()).or_default() += n;
        }
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return BTreeMap::new();
    }
    counts.into_iter().map(|(k, n)| (k, n as f64 / total as f64)).collect()
}

/// Metadata-only similarity in `[0, 1]`: the mean of task-kind match,
/// Jaccard overlap of class names and `1 - TV` between class shares.
pub fn metadata_affinity(task_kind: TaskKind, task: &DatasetRecord, other: &DatasetRecord) -> f64 {
    let kind = if other.task_kind == task_kind { 1.0 } else { 0.0 };
    let a: BTreeSet<&String> = task.class_labels.iter().collect();
    let b: BTreeSet<&String> = other.class_labels.iter().collect();
    let union = a.union(&b).count();
    let jaccard = if union == 0 { 0.0 } else { a.intersection(&b).count() as f64 / union as f64 };
    let (p, q) = (class_shares(task), class_shares(other));
    let overlap = if p.is_empty() || q.is_empty() {
        0.0
    } else {
        let names: BTreeSet<&String> = p.keys().chain(q.keys()).collect();
        let tv = 0.5
            * names
                .iter()
                .map(|n| (p.get(*n).copied().unwrap_or(0.0) - q.get(*n).copied().unwrap_or(0.0)).abs())
                .sum::<f64>();
        1.0 - tv.min(1.0)
    };
    (kind + jaccard + overlap) / 3.0
}
