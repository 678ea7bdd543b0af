//! The fingerprinting autoencoder: encoder `f`, decoder `g`, trained on
//! reconstruction MSE. Fingerprints are encoder outputs in eval mode.

mod latent;

pub use latent::{cluster_distances, similarity, DatasetEmbedding, Fingerprint, LatentPoint};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{arch, ensure_image_batch, fit, Binding, Builder, FitConfig, ParamStore, Pass, Preset, Sequential, TrainingReport};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::tensor::{self, Tape, Tensor, Var};

pub const CHECKPOINT_KIND: &str = "autoencoder";
/// Images per forward pass when fingerprinting.
pub const INFER_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub preset: Preset,
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            preset: Preset::Tiny,
            latent_dim: 2,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            output_activation: OutputActivation::Sigmoid,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::validation("latent_dim must be >= 1"));
        }
        self.fit_config().validate()
    }

    fn fit_config(&self) -> FitConfig {
        FitConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder<T = f32> {
    pub config: AutoencoderConfig,
    pub store: ParamStore<T>,
    pub encoder: Sequential,
    pub decoder: Sequential,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn build(config: AutoencoderConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut rng = substream(config.seed, 0);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let encoder = arch::encoder(&mut b, config.preset, "encoder", config.latent_dim);
        let decoder = arch::decoder(&mut b, config.preset, "decoder", config.latent_dim);
        Ok(Autoencoder {
            config,
            store,
            encoder,
            decoder,
        })
    }

    /// Parameters of the encoder without its output head.
    pub fn trunk_param_count(&self) -> usize {
        let mut trunk = self.encoder.clone();
        trunk.layers.pop();
        trunk.param_count(&self.store)
    }

    /// `[N,3,32,32] -> [N, latent_dim]`, eval mode.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        ensure_image_batch(images)?;
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let z = self.encoder.infer(&self.store, &mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    /// `[N, latent_dim] -> [N,3,32,32]`, eval mode.
    pub fn decode(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        let s = latent.shape();
        if s.len() != 2 || s[1] != self.config.latent_dim {
            return Err(tensor::TensorError::Dimension {
                op: "decode",
                detail: format!("expected [N,{}], got {s:?}", self.config.latent_dim),
            }
            .into());
        }
        let mut tape = Tape::new();
        let z = tape.constant(latent.clone());
        let y = self.decoder.infer(&self.store, &mut tape, z)?;
        Ok(tape.value(y).clone())
    }

    pub fn reconstruct(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.encode(images)?)
    }

    /// Mean reconstruction MSE in eval mode.
    pub fn eval_loss(&self, images: &Tensor<T>) -> Result<f64> {
        eval_mse(&self.encoder, &self.decoder, &self.store, images, self.config.batch_size)
    }

    /// Shuffled minibatch Adam on reconstruction MSE. Keeps the parameters of
    /// the epoch with the lowest validation loss.
    pub fn train(&mut self, train: &Tensor<T>, val: Option<&Tensor<T>>) -> Result<TrainingReport> {
        ensure_image_batch(train)?;
        if let Some(v) = val {
            ensure_image_batch(v)?;
        }
        let cfg = self.config.fit_config();
        let (encoder, decoder) = (&self.encoder, &self.decoder);
        fit(
            &mut self.store,
            &cfg,
            train.shape()[0],
            |store, tape, binding, idx| reconstruction_loss(encoder, decoder, store, tape, binding, &train.gather(idx)?),
            |store| match val {
                Some(v) => eval_mse(encoder, decoder, store, v, cfg.batch_size).map(Some),
                None => Ok(None),
            },
        )
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        Checkpoint::from_tensors(CHECKPOINT_KIND, self.config.preset, config, &self.store.named_tensors())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.manifest.kind != CHECKPOINT_KIND {
            return Err(Error::validation(format!(
                "checkpoint {} is a {} model, not an autoencoder",
                ck.content_hash(),
                ck.manifest.kind
            )));
        }
        let config: AutoencoderConfig = serde_json::from_value(ck.manifest.config.clone())?;
        let mut ae = Self::build(config)?;
        ae.store.load_named(&ck.tensors()?).map_err(Error::Integrity)?;
        Ok(ae)
    }
}

fn reconstruction_loss<T: Scalar>(
    encoder: &Sequential,
    decoder: &Sequential,
    store: &mut ParamStore<T>,
    tape: &mut Tape<T>,
    binding: &mut Binding,
    batch: &Tensor<T>,
) -> tensor::Result<Var> {
    let x = tape.constant(batch.clone());
    let z = encoder.forward(store, tape, binding, x, Pass::TRAIN)?;
    let y = decoder.forward(store, tape, binding, z, Pass::TRAIN)?;
    tape.mse_loss(y, x)
}

fn eval_mse<T: Scalar>(
    encoder: &Sequential,
    decoder: &Sequential,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    chunk: usize,
) -> Result<f64> {
    let n = images.shape()[0];
    let mut sum = 0.0;
    let idx: Vec<usize> = (0..n).collect();
    for part in idx.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let x = tape.constant(images.gather(part)?);
        let z = encoder.infer(store, &mut tape, x)?;
        let y = decoder.infer(store, &mut tape, z)?;
        let l = tape.mse_loss(y, x)?;
        sum += tape.value(l).data()[0].to_f64_lossy() * part.len() as f64;
    }
    Ok(sum / n as f64)
}

/// Converts `[N,3,32,32]` 8-bit pixels to floats in `[0, 1]`.
pub fn normalize_pixels<T: Scalar>(pixels: &[u8], n: usize) -> Result<Tensor<T>> {
    let scale = T::from_f64_lossy(1.0 / 255.0);
    let data = pixels.iter().map(|&p| T::from_f64_lossy(p as f64) * scale).collect();
    Ok(Tensor::new([n, 3, 32, 32], data)?)
}

/// A trained autoencoder identified by its checkpoint hash.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub ae: Autoencoder<f32>,
    version: String,
}

impl Embedder {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Embedder {
            ae: Autoencoder::from_checkpoint(ck)?,
            version: ck.content_hash().to_string(),
        })
    }

    pub fn from_autoencoder(ae: Autoencoder<f32>) -> Self {
        let version = ae.to_checkpoint().content_hash().to_string();
        Embedder { ae, version }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn latent_dim(&self) -> usize {
        self.ae.config.latent_dim
    }

    /// Raw latent codes, one row per image, computed in fixed-size chunks.
    pub fn embed(&self, images: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
        ensure_image_batch(images)?;
        let n = images.shape()[0];
        let d = self.latent_dim();
        let idx: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(n);
        for part in idx.chunks(INFER_CHUNK) {
            let z = self.ae.encode(&images.gather(part)?)?;
            out.extend(z.data().chunks(d).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    /// One fingerprint per image, in input order.
    pub fn fingerprint_images(&self, images: &Tensor<f32>, ids: &[String]) -> Result<Vec<Fingerprint>> {
        let n = images.shape().first().copied().unwrap_or(0);
        if ids.len() != n {
            return Err(Error::validation(format!("{} ids for {n} images", ids.len())));
        }
        let codes = self.embed(images)?;
        Ok(codes
            .into_iter()
            .zip(ids)
            .map(|(vector, id)| Fingerprint {
                vector,
                source_image_id: id.clone(),
                embedder_version: self.version.clone(),
            })
            .collect())
    }

    pub fn fingerprint_pixels(&self, pixels: &[u8], ids: &[String]) -> Result<Vec<Fingerprint>> {
        let images = normalize_pixels(pixels, ids.len())?;
        self.fingerprint_images(&images, ids)
    }
}
