//! Models developed for registered tasks: an image classifier sharing the
//! encoder trunk layout, or an autoencoder for reconstruction tasks.

use serde::{Deserialize, Serialize};

use crate::embedder::{self, Autoencoder, AutoencoderConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricName, TaskKind};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{arch, ensure_image_batch, fit, Builder, FitConfig, ParamStore, Pass, Preset, Sequential, TrainingReport};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor};

pub const CLASSIFIER_KIND: &str = "classifier";
/// Label value for images without a class.
pub const UNLABELED: u16 = u16::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub preset: Preset,
    pub num_classes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub store: ParamStore<f32>,
    pub net: Sequential,
}

impl Classifier {
    pub fn build(config: ClassifierConfig) -> Result<Self> {
        if config.num_classes < 1 {
            return Err(Error::validation("a classifier needs at least one class"));
        }
        let mut store = ParamStore::default();
        let mut rng = substream(config.seed, 0);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        // Same parameter names as the autoencoder encoder so either can warm-start the other.
        let net = arch::encoder(&mut b, config.preset, "encoder", config.num_classes);
        Ok(Classifier { config, store, net })
    }

    /// `[N, num_classes]` logits, eval mode.
    pub fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        ensure_image_batch(images)?;
        let n = images.shape()[0];
        let idx: Vec<usize> = (0..n).collect();
        let mut data = Vec::with_capacity(n * self.config.num_classes);
        for part in idx.chunks(embedder::INFER_CHUNK) {
            let mut tape = Tape::new();
            let x = tape.constant(images.gather(part)?);
            let y = self.net.infer(&self.store, &mut tape, x)?;
            data.extend_from_slice(tape.value(y).data());
        }
        Ok(Tensor::new([n, self.config.num_classes], data)?)
    }

    /// Arg-max class per image; the lowest index wins ties.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok(logits
            .data()
            .chunks(self.config.num_classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&l| l >= self.config.num_classes) {
            Some(l) => Err(Error::validation(format!("label {l} out of range for {} classes", self.config.num_classes))),
            None => Ok(()),
        }
    }

    /// Mean cross-entropy in eval mode.
    pub fn eval_loss(&self, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        eval_ce(&self.net, &self.store, images, labels)
    }

    pub fn train(
        &mut self,
        train: (&Tensor<f32>, &[usize]),
        val: Option<(&Tensor<f32>, &[usize])>,
        cfg: &FitConfig,
    ) -> Result<TrainingReport> {
        ensure_image_batch(train.0)?;
        if train.0.shape()[0] != train.1.len() {
            return Err(Error::validation("image and label counts differ"));
        }
        self.check_labels(train.1)?;
        if let Some((v, l)) = val {
            ensure_image_batch(v)?;
            self.check_labels(l)?;
        }
        let net = &self.net;
        fit(
            &mut self.store,
            cfg,
            train.1.len(),
            |store, tape, binding, idx| {
                let x = tape.constant(train.0.gather(idx)?);
                let y = net.forward(store, tape, binding, x, Pass::TRAIN)?;
                let labels: Vec<usize> = idx.iter().map(|&i| train.1[i]).collect();
                tape.cross_entropy(y, &labels)
            },
            |store| match val {
                Some((v, l)) if !l.is_empty() => eval_ce(net, store, v, l).map(Some),
                _ => Ok(None),
            },
        )
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        Checkpoint::from_tensors(CLASSIFIER_KIND, self.config.preset, config, &self.store.named_tensors())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.manifest.kind != CLASSIFIER_KIND {
            return Err(Error::validation(format!("checkpoint kind {} is not a classifier", ck.manifest.kind)));
        }
        let config: ClassifierConfig = serde_json::from_value(ck.manifest.config.clone())?;
        let mut model = Self::build(config)?;
        model.store.load_named(&ck.tensors()?).map_err(Error::Integrity)?;
        Ok(model)
    }
}

fn eval_ce(net: &Sequential, store: &ParamStore<f32>, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if n == 0 || images.shape()[0] != n {
        return Err(Error::validation("evaluation needs a non-empty labeled set"));
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut sum = 0.0;
    for part in idx.chunks(embedder::INFER_CHUNK) {
        let mut tape = Tape::new();
        let x = tape.constant(images.gather(part)?);
        let y = net.infer(store, &mut tape, x)?;
        let l: Vec<usize> = part.iter().map(|&i| labels[i]).collect();
        let loss = tape.cross_entropy(y, &l)?;
        sum += tape.value(loss).data()[0] as f64 * part.len() as f64;
    }
    Ok(sum / n as f64)
}

/// A trained model for a task, as stored in the model registry.
#[derive(Clone, Debug)]
pub enum TaskModel {
    Classifier(Classifier),
    Autoencoder(Autoencoder<f32>),
}

/// Hyperparameters that shape a fresh task model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: TaskKind,
    pub preset: Preset,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub seed: u64,
}

impl TaskModel {
    pub fn build(spec: &ModelSpec, fit_cfg: &FitConfig) -> Result<Self> {
        Ok(match spec.kind {
            TaskKind::Classification => TaskModel::Classifier(Classifier::build(ClassifierConfig {
                preset: spec.preset,
                num_classes: spec.num_classes,
                seed: spec.seed,
            })?),
            TaskKind::Reconstruction => TaskModel::Autoencoder(Autoencoder::build(AutoencoderConfig {
                preset: spec.preset,
                latent_dim: spec.latent_dim,
                learning_rate: fit_cfg.learning_rate,
                batch_size: fit_cfg.batch_size,
                epochs: fit_cfg.epochs,
                seed: spec.seed,
                ..AutoencoderConfig::default()
            })?),
        })
    }

    pub fn task_kind(&self) -> TaskKind {
        match self {
            TaskModel::Classifier(_) => TaskKind::Classification,
            TaskModel::Autoencoder(_) => TaskKind::Reconstruction,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        match self {
            TaskModel::Classifier(c) => &mut c.store,
            TaskModel::Autoencoder(a) => &mut a.store,
        }
    }

    /// Copies compatible tensors from another checkpoint; returns how many.
    pub fn warm_start(&mut self, source: &Checkpoint) -> Result<usize> {
        let named = source.tensors::<f32>()?;
        Ok(self.store_mut().load_matching(&named))
    }

    /// Trains on the labeled (classification) or all (reconstruction) images.
    pub fn train(
        &mut self,
        train: (&Tensor<f32>, &[usize]),
        val: Option<(&Tensor<f32>, &[usize])>,
        cfg: &FitConfig,
    ) -> Result<TrainingReport> {
        match self {
            TaskModel::Classifier(c) => c.train(train, val, cfg),
            TaskModel::Autoencoder(a) => {
                a.config.learning_rate = cfg.learning_rate;
                a.config.batch_size = cfg.batch_size;
                a.config.epochs = cfg.epochs;
                a.config.seed = cfg.seed;
                a.train(train.0, val.map(|v| v.0))
            }
        }
    }

    /// The task metric on a labeled evaluation set (labels ignored for
    /// reconstruction).
    pub fn evaluate(&self, metric: MetricName, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        metric.check(self.task_kind())?;
        match self {
            TaskModel::Classifier(c) => metrics::score_labels(metric, labels, &c.predict(images)?),
            TaskModel::Autoencoder(a) => {
                let rec = a.reconstruct(images)?;
                metrics::neg_mse(rec.data(), images.data())
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            TaskModel::Classifier(c) => c.to_checkpoint(),
            TaskModel::Autoencoder(a) => a.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match ck.manifest.kind.as_str() {
            CLASSIFIER_KIND => Ok(TaskModel::Classifier(Classifier::from_checkpoint(ck)?)),
            embedder::CHECKPOINT_KIND => Ok(TaskModel::Autoencoder(Autoencoder::from_checkpoint(ck)?)),
            other => Err(Error::validation(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Keeps images whose label is a valid class, returning them with their labels.
pub fn labeled_subset(images: &Tensor<f32>, labels: &[u16], num_classes: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
    let keep: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] != UNLABELED && (labels[i] as usize) < num_classes)
        .collect();
    if keep.is_empty() {
        return Err(Error::validation("no labeled images available"));
    }
    let lab = keep.iter().map(|&i| labels[i] as usize).collect();
    Ok((images.gather(&keep)?, lab))
}
