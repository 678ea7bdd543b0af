use serde::{Deserialize, Serialize};

use super::{Parameter, Result, TensorError};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment buffers for one parameter list, with bias-corrected updates.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Parameter<T>], config: AdamConfig) -> Self {
        AdamState {
            config,
            m: params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[T] {
        &self.v[index]
    }

    /// Applies one update to every parameter. Gradients are read, not cleared.
    /// Fails before touching anything if a parameter lacks a gradient.
    pub fn step(&mut self, params: &mut [Parameter<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(TensorError::Invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.m) {
            match p.tensor.grad() {
                None => return Err(TensorError::MissingGrad(p.name.clone())),
                Some(g) if g.len() != m.len() => {
                    return Err(TensorError::Invalid(format!("parameter `{}` changed size", p.name)))
                }
                Some(_) => {}
            }
        }
        self.t += 1;
        let c = &self.config;
        let lr = T::from_f64_lossy(c.learning_rate);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let eps = T::from_f64_lossy(c.epsilon);
        let exp = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bc1 = T::one() - b1.powi(exp);
        let bc2 = T::one() - b2.powi(exp);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.tensor.grad.take().expect("checked above");
            let theta = p.tensor.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.tensor.grad = Some(g);
        }
        Ok(())
    }
}
