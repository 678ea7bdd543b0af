use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub vector: Vec<f32>,
    pub source_image_id: String,
    pub embedder_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEmbedding {
    pub mean_vector: Vec<f64>,
    pub per_split: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub split_counts: BTreeMap<String, usize>,
    pub count: usize,
    pub embedder_version: String,
}

fn mean_of<'a>(vectors: impl Iterator<Item = &'a [f32]>, dim: usize) -> (Vec<f64>, usize) {
    let mut sum = vec![0.0f64; dim];
    let mut n = 0;
    for v in vectors {
        for (s, &x) in sum.iter_mut().zip(v) {
            *s += x as f64;
        }
        n += 1;
    }
    if n > 0 {
        sum.iter_mut().for_each(|s| *s /= n as f64);
    }
    (sum, n)
}

impl DatasetEmbedding {
    /// Means overall and per split. `splits` are index ranges into
    /// `fingerprints`; empty ranges are skipped.
    pub fn from_fingerprints(fingerprints: &[Fingerprint], splits: &[(String, Range<usize>)]) -> Result<Self> {
        let first = fingerprints
            .first()
            .ok_or_else(|| Error::validation("cannot embed an empty fingerprint set"))?;
        let dim = first.vector.len();
        for f in fingerprints {
            if f.embedder_version != first.embedder_version {
                return Err(Error::IncomparableFingerprints(
                    first.embedder_version.clone(),
                    f.embedder_version.clone(),
                ));
            }
            if f.vector.len() != dim || f.vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!("bad fingerprint for image {}", f.source_image_id)));
            }
        }
        let (mean_vector, count) = mean_of(fingerprints.iter().map(|f| f.vector.as_slice()), dim);
        let mut per_split = BTreeMap::new();
        let mut split_counts = BTreeMap::new();
        for (name, range) in splits {
            let part = fingerprints
                .get(range.clone())
                .ok_or_else(|| Error::validation(format!("split {name} range {range:?} out of bounds")))?;
            if part.is_empty() {
                continue;
            }
            let (m, c) = mean_of(part.iter().map(|f| f.vector.as_slice()), dim);
            per_split.insert(name.clone(), m);
            split_counts.insert(name.clone(), c);
        }
        Ok(DatasetEmbedding {
            mean_vector,
            per_split,
            split_counts,
            count,
            embedder_version: first.embedder_version.clone(),
        })
    }
}

/// A point in an embedder's latent space.
pub trait LatentPoint {
    fn coords(&self) -> Vec<f64>;
    fn embedder_version(&self) -> &str;
}

impl LatentPoint for Fingerprint {
    fn coords(&self) -> Vec<f64> {
        self.vector.iter().map(|&x| x as f64).collect()
    }
    fn embedder_version(&self) -> &str {
        &self.embedder_version
    }
}

impl LatentPoint for DatasetEmbedding {
    fn coords(&self) -> Vec<f64> {
        self.mean_vector.clone()
    }
    fn embedder_version(&self) -> &str {
        &self.embedder_version
    }
}

/// Euclidean distance; points from different embedders are never compared.
pub fn similarity(a: &impl LatentPoint, b: &impl LatentPoint) -> Result<f64> {
    if a.embedder_version() != b.embedder_version() {
        return Err(Error::IncomparableFingerprints(
            a.embedder_version().to_string(),
            b.embedder_version().to_string(),
        ));
    }
    let (x, y) = (a.coords(), b.coords());
    if x.len() != y.len() {
        return Err(Error::validation(format!("latent dims differ: {} vs {}", x.len(), y.len())));
    }
    Ok(x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
}

/// Mean Euclidean distance over pairs within the same group and over pairs
/// from different groups.
pub fn cluster_distances(groups: &[Vec<Vec<f32>>]) -> (f64, f64) {
    let dist = |a: &[f32], b: &[f32]| -> f64 {
        a.iter().zip(b).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>().sqrt()
    };
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for (gi, g) in groups.iter().enumerate() {
        for (i, a) in g.iter().enumerate() {
            for b in &g[i + 1..] {
                intra += dist(a, b);
                n_intra += 1;
            }
            for h in &groups[gi + 1..] {
                for b in h {
                    inter += dist(a, b);
                    n_inter += 1;
                }
            }
        }
    }
    (intra / n_intra.max(1) as f64, inter / n_inter.max(1) as f64)
}
