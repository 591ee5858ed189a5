use serde::{Deserialize, Serialize};

use crate::error::{QenetError, Result};
use crate::nn::Parameterized;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are stored per parameter in the
/// traversal order of the model they were created for.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub names: Vec<String>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<M: Parameterized<T>>(config: AdamConfig, model: &M) -> Self {
        let params = model.named_params();
        let zeros = || params.iter().map(|(_, p)| vec![T::zero(); p.len()]).collect::<Vec<_>>();
        Adam { config, t: 0, names: params.iter().map(|(n, _)| n.clone()).collect(), m: zeros(), v: zeros() }
    }

    /// Updates the trainable parameters of `params` whose names pass `filter`.
    pub fn step<M: Parameterized<T>>(&mut self, params: &mut M, grads: &M, lr: f64, filter: impl Fn(&str) -> bool) -> Result<()> {
        let g: Vec<(String, &[T])> = grads.named_params().into_iter().map(|(n, p)| (n, p.data.as_slice())).collect();
        if g.len() != self.names.len() || g.iter().zip(&self.names).any(|((a, _), b)| a != b) {
            return Err(QenetError::InvalidArgument("optimizer state does not match model".into()));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = T::from_f64(1.0 - beta1.powi(self.t as i32));
        let c2 = T::from_f64(1.0 - beta2.powi(self.t as i32));
        let (b1, b2, eps, lr) = (T::from_f64(beta1), T::from_f64(beta2), T::from_f64(eps), T::from_f64(lr));
        let one = T::one();
        let mut i = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |name, p| {
            if p.trainable && filter(&name) {
                for (((w, &gi), mi), vi) in p.data.iter_mut().zip(g[i].1).zip(m[i].iter_mut()).zip(v[i].iter_mut()) {
                    *mi = b1 * *mi + (one - b1) * gi;
                    *vi = b2 * *vi + (one - b2) * gi * gi;
                    let mhat = *mi / c1;
                    let vhat = *vi / c2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
            i += 1;
        });
        Ok(())
    }
}
