//! Per-channel batch normalization over the spatial extent.

use super::param::{join, Param, Parameterized};
use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub channels: usize,
}

/// Saved forward state for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mode: NormMode,
    /// Train mode only: batch mean and unbiased variance per channel.
    batch_stats: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(vec![channels], vec![T::one(); channels]),
            beta: Param::zeros(vec![channels]),
            running_mean: Param::buffer(vec![channels], T::zero()),
            running_var: Param::buffer(vec![channels], T::one()),
            channels,
        }
    }

    /// Normalizes and updates running statistics in train mode.
    pub fn forward(&mut self, x: &Tensor<T>, mode: NormMode) -> Result<(Tensor<T>, BnCache<T>)> {
        let (y, cache) = self.normalize(x, mode)?;
        self.update_running(&cache);
        Ok((y, cache))
    }

    /// Inference-only forward in eval mode; does not touch running statistics.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.normalize(x, NormMode::Eval)?.0)
    }

    /// Forward pass without side effects. In train mode the batch statistics
    /// are kept in the cache; [`BatchNorm2d::update_running`] folds them in.
    #[allow(clippy::needless_range_loop)]
    pub fn normalize(&self, x: &Tensor<T>, mode: NormMode) -> Result<(Tensor<T>, BnCache<T>)> {
        if x.c != self.channels {
            return Err(shape_err!("batch norm over {} channels got {}", self.channels, x.c));
        }
        let n = x.plane_len();
        let nf = T::from_f64(n as f64);
        let eps = T::from_f64(BN_EPS);
        let mut y = x.zeros_like();
        let mut xhat = x.zeros_like();
        let mut inv_std = vec![T::zero(); x.c];
        let mut batch = (Vec::new(), Vec::new());
        for c in 0..x.c {
            let plane = x.plane(c);
            let (mean, var) = match mode {
                NormMode::Train => {
                    let mean = plane.iter().copied().sum::<T>() / nf;
                    let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                    let unbiased = if n > 1 { var * nf / T::from_f64(n as f64 - 1.0) } else { var };
                    batch.0.push(mean);
                    batch.1.push(unbiased);
                    (mean, var)
                }
                NormMode::Eval => (self.running_mean.data[c], self.running_var.data[c]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[c] = is;
            let (g, b) = (self.gamma.data[c], self.beta.data[c]);
            let xh = xhat.plane_mut(c);
            for (o, &v) in xh.iter_mut().zip(plane) {
                *o = (v - mean) * is;
            }
            for (o, &v) in y.plane_mut(c).iter_mut().zip(xhat.plane(c)) {
                *o = g * v + b;
            }
        }
        let batch_stats = (mode == NormMode::Train).then_some(batch);
        Ok((y, BnCache { xhat, inv_std, mode, batch_stats }))
    }

    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let Some((mean, var)) = &cache.batch_stats else { return };
        let m = T::from_f64(BN_MOMENTUM);
        for c in 0..self.channels {
            self.running_mean.data[c] = (T::one() - m) * self.running_mean.data[c] + m * mean[c];
            self.running_var.data[c] = (T::one() - m) * self.running_var.data[c] + m * var[c];
        }
    }

    pub fn backward(&self, cache: &BnCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        if !dy.same_shape(&cache.xhat) {
            return Err(shape_err!("batch norm backward {:?}", dy.shape()));
        }
        let n = dy.plane_len();
        let nf = T::from_f64(n as f64);
        let mut dx = dy.zeros_like();
        for c in 0..dy.c {
            let g = dy.plane(c);
            let xh = cache.xhat.plane(c);
            let sum_g: T = g.iter().copied().sum();
            let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            grad.beta.data[c] += sum_g;
            grad.gamma.data[c] += sum_gx;
            let scale = self.gamma.data[c] * cache.inv_std[c];
            let out = dx.plane_mut(c);
            match cache.mode {
                NormMode::Eval => {
                    for (o, &gv) in out.iter_mut().zip(g) {
                        *o = scale * gv;
                    }
                }
                NormMode::Train => {
                    for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(xh) {
                        *o = scale * (gv - sum_g / nf - xv * sum_gx / nf);
                    }
                }
            }
        }
        Ok(dx)
    }
}

impl<T: Real> Parameterized<T> for BatchNorm2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}
