//! On-disk layout shared by the CLI and the service:
//! `datasets/`, `models/`, `embedders/<hash>.ckpt` plus an `active` pointer,
//! and `monitor/<task_id>/`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::{DatasetRecord, DatasetStore, ImageContainer};
use crate::embedder::{DatasetEmbedding, Embedder, Fingerprint};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::models::ModelStore;
use crate::nn::checkpoint::Checkpoint;

#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
    pub datasets: DatasetStore,
    pub models: ModelStore,
}

impl Workspace {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("embedders"))?;
        Ok(Workspace {
            root: root.to_path_buf(),
            datasets: DatasetStore::open(&root.join("datasets"))?,
            models: ModelStore::open(&root.join("models"))?,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn monitor_dir(&self, task_id: &str) -> PathBuf {
        self.root.join("monitor").join(task_id)
    }

    fn embedder_dir(&self) -> PathBuf {
        self.root.join("embedders")
    }

    /// Stores the embedder checkpoint and makes it the active one.
    pub fn install_embedder(&self, embedder: &Embedder) -> Result<String> {
        let ck = embedder.ae.to_checkpoint();
        let hash = ck.content_hash().to_string();
        let path = self.embedder_dir().join(format!("{hash}.ckpt"));
        if !path.exists() {
            ck.save(&path)?;
        }
        write_atomic(&self.embedder_dir().join("active"), hash.as_bytes())?;
        Ok(hash)
    }

    pub fn active_embedder_version(&self) -> Result<String> {
        match fs::read_to_string(self.embedder_dir().join("active")) {
            Ok(s) if !s.trim().is_empty() => Ok(s.trim().to_string()),
            Ok(_) => Err(no_embedder()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(no_embedder()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn embedder(&self, version: &str) -> Result<Embedder> {
        let path = self.embedder_dir().join(format!("{version}.ckpt"));
        if !path.exists() {
            return Err(Error::not_found(format!("embedder checkpoint {version}")));
        }
        let e = Embedder::from_checkpoint(&Checkpoint::load(&path)?)?;
        if e.version() != version {
            return Err(Error::Integrity(format!("embedder file {} holds {}", path.display(), e.version())));
        }
        Ok(e)
    }

    pub fn active_embedder(&self) -> Result<Embedder> {
        self.embedder(&self.active_embedder_version()?)
    }

    /// Fingerprints every image of a dataset version and attaches the result.
    pub fn fingerprint_dataset(&self, id: &str, version: u32, embedder: &Embedder) -> Result<DatasetRecord> {
        let record = self.datasets.get(id, Some(version))?;
        let container = self.datasets.load_container(id, version)?;
        let (fps, emb) = fingerprint_container(&container, &record, embedder)?;
        self.datasets.attach_fingerprints(id, version, &fps, &emb)
    }
}

pub fn fingerprint_container(
    container: &ImageContainer,
    record: &DatasetRecord,
    embedder: &Embedder,
) -> Result<(Vec<Fingerprint>, DatasetEmbedding)> {
    let ids: Vec<String> = (0..container.len()).map(|i| record.image_id(i)).collect();
    let fps = embedder.fingerprint_pixels(&container.pixels, &ids)?;
    let splits: Vec<_> = container.manifest.splits.iter().map(|s| (s.name.clone(), s.range())).collect();
    let emb = DatasetEmbedding::from_fingerprints(&fps, &splits)?;
    Ok((fps, emb))
}

fn no_embedder() -> Error {
    Error::not_found("active embedder (train one with `embedder train`)")
}
