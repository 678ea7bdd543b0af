use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::container::{ContainerManifest, ImageContainer, SplitRange, IMAGE_BYTES};
use crate::embedder::{similarity, DatasetEmbedding, Fingerprint, LatentPoint};
use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, DirLock};
use crate::metrics::{MetricName, TaskKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnownPerformance {
    pub model_id: String,
    pub metric_name: MetricName,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerprintRef {
    pub embedder_version: String,
    pub embedding: DatasetEmbedding,
    /// Per-image fingerprints, relative to the version directory.
    pub file: String,
    pub attached_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub dataset_id: String,
    pub version: u32,
    pub content_hash: String,
    pub name: String,
    pub task_kind: TaskKind,
    pub class_labels: Vec<String>,
    pub class_distribution: BTreeMap<String, BTreeMap<String, usize>>,
    pub split_index: Vec<SplitRange>,
    pub image_count: usize,
    pub fingerprint_ref: Option<FingerprintRef>,
    /// Every attachment in order, including replaced ones.
    #[serde(default)]
    pub fingerprint_history: Vec<FingerprintRef>,
    #[serde(default)]
    pub known_performances: Vec<KnownPerformance>,
    pub created_at: DateTime<Utc>,
    pub source_note: String,
}

impl DatasetRecord {
    /// The latest embedding computed by `embedder_version`, if any.
    pub fn embedding_for(&self, embedder_version: &str) -> Option<&DatasetEmbedding> {
        self.fingerprint_history
            .iter()
            .rev()
            .find(|f| f.embedder_version == embedder_version)
            .map(|f| &f.embedding)
    }

    pub fn split(&self, name: &str) -> Option<&SplitRange> {
        self.split_index.iter().find(|s| s.name == name)
    }

    /// `dataset_id@vN`
    pub fn key(&self) -> String {
        format!("{}@v{}", self.dataset_id, self.version)
    }

    pub fn image_id(&self, index: usize) -> String {
        format!("{}#{index}", self.key())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    dataset_id: String,
    version: u32,
    content_hash: String,
    name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Index {
    records: Vec<IndexEntry>,
}

/// Points in `register` after which a fault hook may abort the write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WriteStep {
    Blobs,
    Record,
    Rename,
}

type FaultHook = Arc<dyn Fn(WriteStep) -> Result<()> + Send + Sync>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub dataset_id: String,
    pub version: u32,
    pub index: usize,
    pub image_id: String,
    pub distance: f64,
}

/// The image database: `<root>/index.json` lists committed records, each in
/// `<root>/<dataset_id>/v<version>/`.
#[derive(Clone)]
pub struct DatasetStore {
    root: PathBuf,
    fault: Option<FaultHook>,
}

impl std::fmt::Debug for DatasetStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DatasetStore").field("root", &self.root).finish()
    }
}

/// Lowercase alphanumerics with single dashes.
pub fn slug(name: &str) -> Result<String> {
    let mut out = String::new();
    for c in name.trim().chars().flat_map(char::to_lowercase) {
        if c.is_ascii_alphanumeric() {
            out.push(c);
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    let out = out.trim_end_matches('-').to_string();
    if out.is_empty() {
        return Err(Error::validation(format!("dataset name `{name}` has no usable characters")));
    }
    Ok(out)
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    // Through `Value` so object keys come out sorted.
    let v = serde_json::to_value(value).expect("serializable");
    serde_json::to_vec_pretty(&v).expect("value serializes")
}

impl DatasetStore {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(DatasetStore {
            root: root.to_path_buf(),
            fault: None,
        })
    }

    /// Installs a hook called after each write step of `register`; an error
    /// aborts the registration at that point, as a crash would.
    pub fn with_fault_hook(mut self, hook: impl Fn(WriteStep) -> Result<()> + Send + Sync + 'static) -> Self {
        self.fault = Some(Arc::new(hook));
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn version_dir(&self, id: &str, version: u32) -> PathBuf {
        self.root.join(id).join(format!("v{version}"))
    }

    fn index(&self) -> Result<Index> {
        let path = self.root.join("index.json");
        if !path.exists() {
            return Ok(Index::default());
        }
        read_json(&path)
    }

    fn step(&self, s: WriteStep) -> Result<()> {
        match &self.fault {
            Some(f) => f(s),
            None => Ok(()),
        }
    }

    /// All committed records, ordered by id then version.
    pub fn list(&self) -> Result<Vec<DatasetRecord>> {
        let mut entries = self.index()?.records;
        entries.sort_by(|a, b| (&a.dataset_id, a.version).cmp(&(&b.dataset_id, b.version)));
        entries.iter().map(|e| self.read_record(&e.dataset_id, e.version)).collect()
    }

    /// The highest version of each dataset.
    pub fn latest_records(&self) -> Result<Vec<DatasetRecord>> {
        let mut latest: BTreeMap<String, DatasetRecord> = BTreeMap::new();
        for r in self.list()? {
            latest.insert(r.dataset_id.clone(), r);
        }
        Ok(latest.into_values().collect())
    }

    fn read_record(&self, id: &str, version: u32) -> Result<DatasetRecord> {
        read_json(&self.version_dir(id, version).join("record.json"))
    }

    /// A committed record; `None` selects the latest version.
    pub fn get(&self, id: &str, version: Option<u32>) -> Result<DatasetRecord> {
        let index = self.index()?;
        let found = index
            .records
            .iter()
            .filter(|e| e.dataset_id == id && version.is_none_or(|v| v == e.version))
            .max_by_key(|e| e.version);
        match found {
            Some(e) => self.read_record(&e.dataset_id, e.version),
            None => Err(Error::not_found(match version {
                Some(v) => format!("dataset {id} version {v}"),
                None => format!("dataset {id}"),
            })),
        }
    }

    pub fn load_container(&self, id: &str, version: u32) -> Result<ImageContainer> {
        let record = self.get(id, Some(version))?;
        let dir = self.version_dir(id, version);
        let manifest: ContainerManifest = read_json(&dir.join("manifest.json"))?;
        let pixels = fs::read(dir.join("data.bin"))?;
        let label_bytes = fs::read(dir.join("labels.bin"))?;
        if label_bytes.len() % 2 != 0 {
            return Err(Error::Integrity(format!("{}: odd-length label blob", record.key())));
        }
        let labels = label_bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        let c = ImageContainer { manifest, pixels, labels };
        c.validate().map_err(|e| Error::Integrity(format!("{}: {e}", record.key())))?;
        if c.content_hash() != record.content_hash {
            return Err(Error::Integrity(format!("{}: content hash mismatch", record.key())));
        }
        Ok(c)
    }

    /// Registers a container under `name`. Identical content to the latest
    /// version returns that record unchanged (`false`); otherwise a new
    /// version is committed (`true`).
    pub fn register(
        &self,
        container: &ImageContainer,
        name: &str,
        task_kind: TaskKind,
        source_note: &str,
    ) -> Result<(DatasetRecord, bool)> {
        container.validate()?;
        let id = slug(name)?;
        let hash = container.content_hash();
        let _lock = DirLock::acquire(&self.root)?;
        let mut index = self.index()?;
        let latest = index.records.iter().filter(|e| e.dataset_id == id).map(|e| e.version).max();
        if let Some(v) = latest {
            let existing = self.read_record(&id, v)?;
            if existing.content_hash == hash {
                return Ok((existing, false));
            }
        }
        let version = latest.map_or(1, |v| v + 1);
        let mut manifest = container.manifest.clone();
        manifest.name = name.to_string();
        let record = DatasetRecord {
            dataset_id: id.clone(),
            version,
            content_hash: hash.clone(),
            name: name.to_string(),
            task_kind,
            class_labels: manifest.classes.clone(),
            class_distribution: container.class_distribution(),
            split_index: manifest.splits.clone(),
            image_count: container.len(),
            fingerprint_ref: None,
            fingerprint_history: Vec::new(),
            known_performances: Vec::new(),
            created_at: Utc::now(),
            source_note: source_note.to_string(),
        };

        let parent = self.root.join(&id);
        fs::create_dir_all(&parent)?;
        let tmp = parent.join(format!(".tmp-v{version}-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        write_synced(&tmp.join("manifest.json"), &pretty(&manifest))?;
        write_synced(&tmp.join("data.bin"), &container.pixels)?;
        write_synced(&tmp.join("labels.bin"), &container.label_bytes())?;
        self.step(WriteStep::Blobs)?;
        write_synced(&tmp.join("record.json"), &pretty(&record))?;
        self.step(WriteStep::Record)?;
        let dir = self.version_dir(&id, version);
        if dir.exists() {
            // Left behind by an interrupted registration; never indexed.
            fs::remove_dir_all(&dir)?;
        }
        fs::rename(&tmp, &dir)?;
        self.step(WriteStep::Rename)?;
        index.records.push(IndexEntry {
            dataset_id: id,
            version,
            content_hash: hash,
            name: name.to_string(),
        });
        write_atomic(&self.root.join("index.json"), &pretty(&index))?;
        Ok((record, true))
    }

    /// Read-modify-write of a committed record under the store lock.
    fn update_record(&self, id: &str, version: u32, f: impl FnOnce(&mut DatasetRecord) -> Result<()>) -> Result<DatasetRecord> {
        let _lock = DirLock::acquire(&self.root)?;
        let mut record = self.get(id, Some(version))?;
        f(&mut record)?;
        write_atomic(&self.version_dir(id, version).join("record.json"), &pretty(&record))?;
        Ok(record)
    }

    /// Stores per-image fingerprints and their embedding as the record's
    /// current fingerprint reference.
    pub fn attach_fingerprints(
        &self,
        id: &str,
        version: u32,
        fingerprints: &[Fingerprint],
        embedding: &DatasetEmbedding,
    ) -> Result<DatasetRecord> {
        let record = self.get(id, Some(version))?;
        if fingerprints.len() != record.image_count {
            return Err(Error::validation(format!(
                "{} fingerprints for {} images in {}",
                fingerprints.len(),
                record.image_count,
                record.key()
            )));
        }
        let ver = &embedding.embedder_version;
        if let Some(f) = fingerprints.iter().find(|f| &f.embedder_version != ver) {
            return Err(Error::IncomparableFingerprints(ver.clone(), f.embedder_version.clone()));
        }
        let file = format!("fingerprints/{ver}.json");
        let dir = self.version_dir(id, version);
        fs::create_dir_all(dir.join("fingerprints"))?;
        write_atomic(&dir.join(&file), &serde_json::to_vec(fingerprints)?)?;
        let fref = FingerprintRef {
            embedder_version: ver.clone(),
            embedding: embedding.clone(),
            file,
            attached_at: Utc::now(),
        };
        self.update_record(id, version, |r| {
            r.fingerprint_history.push(fref.clone());
            r.fingerprint_ref = Some(fref);
            Ok(())
        })
    }

    pub fn fingerprints(&self, id: &str, version: u32, embedder_version: &str) -> Result<Vec<Fingerprint>> {
        let path = self
            .version_dir(id, version)
            .join("fingerprints")
            .join(format!("{embedder_version}.json"));
        if !path.exists() {
            return Err(Error::not_found(format!("fingerprints of {id}@v{version} by embedder {embedder_version}")));
        }
        read_json(&path)
    }

    pub fn add_known_performance(&self, id: &str, version: u32, perf: KnownPerformance) -> Result<DatasetRecord> {
        self.update_record(id, version, |r| {
            r.known_performances.push(perf);
            Ok(())
        })
    }

    /// Records embedded by the query's embedder, nearest first. Ties go to
    /// the older version, then the smaller dataset id.
    pub fn nearest_datasets(&self, query: &DatasetEmbedding, k: usize) -> Result<Vec<(DatasetRecord, f64)>> {
        let mut scored = Vec::new();
        for r in self.list()? {
            let Some(e) = r.embedding_for(&query.embedder_version) else {
                continue;
            };
            let d = similarity(query, e)?;
            scored.push((r, d));
        }
        scored.sort_by(|(a, da), (b, db)| {
            da.total_cmp(db)
                .then(a.version.cmp(&b.version))
                .then_with(|| a.dataset_id.cmp(&b.dataset_id))
        });
        scored.truncate(k);
        Ok(scored)
    }

    /// The `k` records nearest to a stored record under its current
    /// fingerprints, excluding the record itself.
    pub fn similar_to(&self, id: &str, version: Option<u32>, k: usize) -> Result<(DatasetRecord, Vec<(DatasetRecord, f64)>)> {
        let record = self.get(id, version)?;
        let Some(fref) = &record.fingerprint_ref else {
            return Err(Error::validation(format!("{} has no fingerprints", record.key())));
        };
        let mut near = self.nearest_datasets(&fref.embedding, k + 1)?;
        near.retain(|(r, _)| r.key() != record.key());
        near.truncate(k);
        Ok((record, near))
    }

    /// The `n` stored images nearest to `query`, drawn from the latest
    /// fingerprinted version of each dataset (except `exclude`). With
    /// `stratify`, sources take turns in order of their nearest image.
    pub fn nearest_images(
        &self,
        query: &impl LatentPoint,
        n: usize,
        stratify: bool,
        exclude: Option<&str>,
    ) -> Result<Vec<ImageRef>> {
        let version = query.embedder_version().to_string();
        let q = query.coords();
        let mut sources: BTreeMap<String, DatasetRecord> = BTreeMap::new();
        for r in self.list()? {
            if exclude == Some(r.dataset_id.as_str()) || r.embedding_for(&version).is_none() {
                continue;
            }
            sources.insert(r.dataset_id.clone(), r);
        }
        let mut per_source: Vec<Vec<ImageRef>> = Vec::new();
        for r in sources.values() {
            let fps = self.fingerprints(&r.dataset_id, r.version, &version)?;
            let mut refs: Vec<ImageRef> = fps
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let d = f
                        .vector
                        .iter()
                        .zip(&q)
                        .map(|(&a, b)| (a as f64 - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    ImageRef {
                        dataset_id: r.dataset_id.clone(),
                        version: r.version,
                        index: i,
                        image_id: r.image_id(i),
                        distance: d,
                    }
                })
                .collect();
            refs.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
            per_source.push(refs);
        }
        let order = |a: &ImageRef, b: &ImageRef| {
            a.distance
                .total_cmp(&b.distance)
                .then_with(|| a.dataset_id.cmp(&b.dataset_id))
                .then(a.version.cmp(&b.version))
                .then(a.index.cmp(&b.index))
        };
        if !stratify {
            let mut all: Vec<ImageRef> = per_source.into_iter().flatten().collect();
            all.sort_by(order);
            all.truncate(n);
            return Ok(all);
        }
        per_source.retain(|s| !s.is_empty());
        per_source.sort_by(|a, b| order(&a[0], &b[0]));
        let mut out = Vec::with_capacity(n);
        let mut cursors = vec![0usize; per_source.len()];
        while out.len() < n {
            let mut progressed = false;
            for (s, src) in per_source.iter().enumerate() {
                if out.len() == n {
                    break;
                }
                if let Some(r) = src.get(cursors[s]) {
                    out.push(r.clone());
                    cursors[s] += 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        Ok(out)
    }

    /// Pixels and labels of the referenced images, in order.
    pub fn gather_images(&self, refs: &[ImageRef]) -> Result<(Vec<u8>, Vec<u16>, Vec<String>)> {
        let mut cache: BTreeMap<(String, u32), ImageContainer> = BTreeMap::new();
        let mut pixels = Vec::with_capacity(refs.len() * IMAGE_BYTES);
        let mut labels = Vec::with_capacity(refs.len());
        let mut classes = Vec::with_capacity(refs.len());
        for r in refs {
            let key = (r.dataset_id.clone(), r.version);
            if !cache.contains_key(&key) {
                let c = self.load_container(&r.dataset_id, r.version)?;
                cache.insert(key.clone(), c);
            }
            let c = &cache[&key];
            if r.index >= c.len() {
                return Err(Error::not_found(format!("image {}", r.image_id)));
            }
            pixels.extend_from_slice(c.image(r.index));
            let l = c.labels[r.index];
            labels.push(l);
            classes.push(c.manifest.classes.get(l as usize).cloned().unwrap_or_default());
        }
        Ok((pixels, labels, classes))
    }
}
