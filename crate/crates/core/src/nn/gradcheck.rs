//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls forward passes, so it stays independent
//! of the hand-written backward code it validates.

use serde::Serialize;

use super::param::Parameterized;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_error: f64,
    pub worst_entry: Option<String>,
    pub worst_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn from_pairs(name: &str, pairs: &[(String, f64, f64)], tolerance: f64) -> Self {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        let mut worst = (None, 0.0);
        for (label, a, n) in pairs {
            let d = (a - n).abs();
            diff += d * d;
            na += a * a;
            nn += n * n;
            if d > worst.1 {
                worst = (Some(label.clone()), d);
            }
        }
        let denom = na.sqrt().max(nn.sqrt());
        let rel_error = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
        GradCheckReport {
            name: name.to_string(),
            checked: pairs.len(),
            rel_error,
            worst_entry: worst.0,
            worst_abs_error: worst.1,
            tolerance,
            passed: rel_error <= tolerance && rel_error.is_finite(),
        }
    }
}

/// Central difference of `f` at `x[i]` for each requested index.
pub fn numeric_grad_tensor(x: &Tensor<f64>, indices: &[usize], step: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut xp = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = xp.data[i];
            xp.data[i] = orig + step;
            let up = f(&xp);
            xp.data[i] = orig - step;
            let down = f(&xp);
            xp.data[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Compares tensor gradient `analytic` against central differences of `f`.
pub fn check_tensor(
    name: &str,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    max_entries: usize,
    step: f64,
    tolerance: f64,
    f: impl FnMut(&Tensor<f64>) -> f64,
) -> GradCheckReport {
    let idx = spread(x.len(), max_entries);
    let num = numeric_grad_tensor(x, &idx, step, f);
    let pairs: Vec<_> = idx.iter().zip(num).map(|(&i, n)| (format!("{name}[{i}]"), analytic.data[i], n)).collect();
    GradCheckReport::from_pairs(name, &pairs, tolerance)
}

/// Compares every trainable parameter's accumulated gradient in `grads`
/// against central differences of `loss`, sampling up to `per_param`
/// entries of each parameter.
pub fn check_params<M>(
    name: &str,
    model: &M,
    grads: &M,
    per_param: usize,
    step: f64,
    tolerance: f64,
    mut loss: impl FnMut(&M) -> f64,
) -> GradCheckReport
where
    M: Parameterized<f64> + Clone,
{
    let analytic: Vec<(String, Vec<f64>, bool)> = grads.named_params().into_iter().map(|(n, p)| (n, p.data.clone(), p.trainable)).collect();
    let mut probe = model.clone();
    let mut pairs = Vec::new();
    for (pi, (pname, agrad, trainable)) in analytic.iter().enumerate() {
        if !trainable {
            continue;
        }
        for ei in spread(agrad.len(), per_param) {
            let nudge = |m: &mut M, delta: f64| {
                let mut k = 0;
                m.visit_mut("", &mut |_, p| {
                    if k == pi {
                        p.data[ei] += delta;
                    }
                    k += 1;
                });
            };
            let orig = probe.named_params()[pi].1.data[ei];
            nudge(&mut probe, step);
            let up = loss(&probe);
            nudge(&mut probe, -2.0 * step);
            let down = loss(&probe);
            let mut k = 0;
            probe.visit_mut("", &mut |_, p| {
                if k == pi {
                    p.data[ei] = orig;
                }
                k += 1;
            });
            pairs.push((format!("{pname}[{ei}]"), agrad[ei], (up - down) / (2.0 * step)));
        }
    }
    GradCheckReport::from_pairs(name, &pairs, tolerance)
}

/// Up to `max` indices spread evenly over `0..n`.
pub fn spread(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max + (n / max) / 2).collect()
}
