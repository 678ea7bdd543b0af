use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::FitConfig;
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Log-uniform learning-rate range.
    pub learning_rate: (f64, f64),
    pub batch_sizes: Vec<usize>,
    pub fine_tune_epochs: usize,
    pub full_epochs: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            learning_rate: (1e-4, 1e-2),
            batch_sizes: vec![16, 32, 64],
            fine_tune_epochs: 5,
            full_epochs: 30,
            trials: 8,
            seed: 0,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.learning_rate;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::validation(format!("learning-rate range [{lo}, {hi}] is empty or not positive")));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::validation("batch sizes must be a non-empty set of positive sizes"));
        }
        if self.trials == 0 || self.fine_tune_epochs == 0 || self.full_epochs == 0 {
            return Err(Error::validation("trials and epochs must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub trial: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds both initialization and shuffling.
    pub seed: u64,
}

impl TrialParams {
    pub fn fit(&self) -> FitConfig {
        FitConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, serde_json::Value> {
        match serde_json::to_value(self) {
            Ok(serde_json::Value::Object(m)) => m.into_iter().collect(),
            _ => BTreeMap::new(),
        }
    }
}

pub trait SearchStrategy: Send + Sync {
    fn sample(&self, space: &SearchSpace, trial: usize, epochs: usize) -> TrialParams;
}

/// Independent draws per trial from a stream keyed by `(seed, trial)`, so a
/// trial's parameters do not depend on how many trials ran before it.
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomSearch;

impl SearchStrategy for RandomSearch {
    fn sample(&self, space: &SearchSpace, trial: usize, epochs: usize) -> TrialParams {
        let mut rng = substream(space.seed, 1000 + trial as u64);
        let (lo, hi) = space.learning_rate;
        let learning_rate = if lo == hi { lo } else { (rng.gen_range(lo.ln()..hi.ln())).exp() };
        let batch_size = space.batch_sizes[rng.gen_range(0..space.batch_sizes.len())];
        TrialParams { trial, learning_rate, batch_size, epochs, seed: rng.gen() }
    }
}
