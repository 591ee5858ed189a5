//! Enhancement and warping losses.
//!
//! `L_e` is the per-pixel mean squared error averaged over frames; `L_w` is
//! the per-pixel mean absolute error *summed* over frames.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::frame::Frame;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_e: f64,
    pub l_w: f64,
    pub l: f64,
}

impl LossBreakdown {
    pub fn new(l_e: f64, l_w: f64) -> Self {
        LossBreakdown { l_e, l_w, l: l_e + l_w }
    }

    pub fn is_finite(&self) -> bool {
        self.l_e.is_finite() && self.l_w.is_finite() && self.l.is_finite()
    }
}

fn check<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    a.ensure_same_shape(b, "loss operands")?;
    if a.is_empty() {
        return Err(shape_err!("loss over empty tensors"));
    }
    Ok(())
}

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok(s / a.len() as f64)
}

pub fn mae<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum();
    Ok(s / a.len() as f64)
}

/// `weight · d mse(a, b) / d a`.
pub fn mse_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>, weight: f64) -> Tensor<T> {
    let k = T::from_f64(2.0 * weight / a.len() as f64);
    Tensor { data: a.data.iter().zip(&b.data).map(|(&x, &y)| k * (x - y)).collect(), ..a.clone() }
}

/// `weight · d mae(a, b) / d a`, taking the subgradient 0 where `a = b`.
pub fn mae_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>, weight: f64) -> Tensor<T> {
    let k = T::from_f64(weight / a.len() as f64);
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            if x > y {
                k
            } else if x < y {
                -k
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor { data, ..a.clone() }
}

fn aligned<A, B>(a: &[A], b: &[B]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err!("loss over {} vs {} frames", a.len(), b.len()));
    }
    Ok(())
}

pub fn loss_e_tensors<T: Real>(enhanced: &[Tensor<T>], original: &[Tensor<T>]) -> Result<f64> {
    aligned(enhanced, original)?;
    let total = enhanced.iter().zip(original).map(|(e, o)| mse(e, o)).sum::<Result<f64>>()?;
    Ok(total / enhanced.len() as f64)
}

pub fn loss_w_tensors<T: Real>(predicted: &[Tensor<T>], decoded: &[Tensor<T>]) -> Result<f64> {
    aligned(predicted, decoded)?;
    predicted.iter().zip(decoded).map(|(p, d)| mae(p, d)).sum()
}

pub fn loss_e(enhanced: &[Frame], original: &[Frame]) -> Result<f64> {
    aligned(enhanced, original)?;
    let total = enhanced.iter().zip(original).map(|(e, o)| mse(&e.pixels, &o.pixels)).sum::<Result<f64>>()?;
    Ok(total / enhanced.len() as f64)
}

pub fn loss_w(predicted: &[Frame], decoded: &[Frame]) -> Result<f64> {
    aligned(predicted, decoded)?;
    predicted.iter().zip(decoded).map(|(p, d)| mae(&p.pixels, &d.pixels)).sum()
}
