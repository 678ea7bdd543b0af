use crate::scalar::Scalar;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics. `update_running` folds them into the
    /// running estimates; gradient checks switch it off.
    Train { update_running: bool },
    Eval,
}

/// Running per-channel mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Per-channel mean and biased variance over `[N, C, L]`, accumulated in f64.
pub(crate) fn channel_moments<T: Scalar>(x: &[T], n: usize, c: usize, l: usize) -> (Vec<T>, Vec<T>) {
    let count = (n * l) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let planes = || (0..n).flat_map(move |b| x[(b * c + ch) * l..(b * c + ch + 1) * l].iter());
        let mu = planes().map(|v| v.to_f64_lossy()).sum::<f64>() / count;
        let ss: f64 = planes().map(|v| (v.to_f64_lossy() - mu).powi(2)).sum();
        mean[ch] = T::from_f64_lossy(mu);
        var[ch] = T::from_f64_lossy(ss / count);
    }
    (mean, var)
}
