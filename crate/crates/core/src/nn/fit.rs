use serde::{Deserialize, Serialize};

use super::{Binding, ParamStore};
use crate::error::{Error, Result};
use crate::rng::{permutation, substream};
use crate::scalar::Scalar;
use crate::tensor::{self, AdamConfig, AdamState, Tape, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::validation("batch_size and epochs must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Loss before the first update, on the validation set (or training set
    /// when no validation data exists).
    pub initial_val_loss: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainingReport {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss
            .get(self.best_epoch.wrapping_sub(1))
            .copied()
            .unwrap_or(f64::INFINITY)
    }
}

/// Shuffled minibatch Adam over `n_train` samples.
///
/// `batch_loss` builds the loss for the given sample indices on a fresh tape.
/// `val_loss` scores the current parameters, returning `None` when there is no
/// validation data, in which case the epoch's training loss stands in. The
/// parameters from the epoch with the lowest validation loss are restored at
/// the end.
pub fn fit<T, L, V>(
    store: &mut ParamStore<T>,
    cfg: &FitConfig,
    n_train: usize,
    mut batch_loss: L,
    mut val_loss: V,
) -> Result<TrainingReport>
where
    T: Scalar,
    L: FnMut(&mut ParamStore<T>, &mut Tape<T>, &mut Binding, &[usize]) -> tensor::Result<Var>,
    V: FnMut(&mut ParamStore<T>) -> Result<Option<f64>>,
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::validation("empty training set"));
    }
    let mut adam = AdamState::new(
        &store.params,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut rng = substream(cfg.seed, 1);
    let mut report = TrainingReport::default();

    report.initial_val_loss = match val_loss(store)? {
        Some(v) => v,
        None => {
            let all: Vec<usize> = (0..n_train).collect();
            let mut sum = 0.0;
            for chunk in all.chunks(cfg.batch_size) {
                let mut tape = Tape::new();
                let l = batch_loss(store, &mut tape, &mut Binding::new(), chunk)?;
                sum += tape.value(l).data()[0].to_f64_lossy() * chunk.len() as f64;
            }
            sum / n_train as f64
        }
    };

    let mut best: Option<(f64, ParamStore<T>)> = None;
    for epoch in 1..=cfg.epochs {
        let order = permutation(&mut rng, n_train);
        let mut sum = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let mut binding = Binding::new();
            let loss = batch_loss(store, &mut tape, &mut binding, chunk).map_err(|e| match e {
                TensorError::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch },
                other => Error::Tensor(other),
            })?;
            let value = tape.value(loss).data()[0].to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            tape.backward(loss).map_err(|e| match e {
                TensorError::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch },
                other => Error::Tensor(other),
            })?;
            store.collect_grads(&mut tape, &binding)?;
            adam.step(&mut store.params)?;
            sum += value * chunk.len() as f64;
        }
        let train = sum / n_train as f64;
        report.train_loss.push(train);
        let val = val_loss(store)?.unwrap_or(train);
        report.val_loss.push(val);
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            report.best_epoch = epoch;
            best = Some((val, store.clone()));
        }
    }
    if let Some((_, snapshot)) = best {
        *store = snapshot;
    }
    for p in &mut store.params {
        p.tensor.zero_grad();
    }
    Ok(report)
}
