//! Loss evaluation and gradient accumulation for one 4-frame sample.
//!
//! In the multi-frame stage the I frame is enhanced by the frozen
//! single-frame network, and the enhanced previous frame enters each step as
//! a clamped constant: gradients reach the flow net and the multi-frame
//! enhancer of the current step only.

use super::loss::{mae, mae_grad, mse, mse_grad, LossBreakdown};
use crate::dataset::{TrainingSample, WINDOW};
use crate::error::{shape_err, Result};
use crate::flownet::FlowTape;
use crate::frame::CHANNELS;
use crate::nn::NormMode;
use crate::pipeline::Models;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::warp::{warp_tensor, warp_tensor_backward};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTensors<T> {
    pub original: Vec<Tensor<T>>,
    pub decoded: Vec<Tensor<T>>,
}

impl<T: Real> SampleTensors<T> {
    pub fn from_sample(s: &TrainingSample) -> Self {
        SampleTensors {
            original: s.original.iter().map(|f| f.pixels.cast()).collect(),
            decoded: s.decoded.iter().map(|f| f.pixels.cast()).collect(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.original.len() != WINDOW || self.decoded.len() != WINDOW {
            return Err(shape_err!("sample has {}/{} frames", self.original.len(), self.decoded.len()));
        }
        Ok(())
    }
}

pub struct StepOutput<T> {
    pub loss: LossBreakdown,
    /// `(L_e term, L_w term)` per loss frame, unweighted.
    pub per_frame: Vec<(f64, f64)>,
    /// Train-mode flow passes whose batch statistics still need committing.
    pub flow_tapes: Vec<FlowTape<T>>,
}

fn clamp01<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()).min(T::one()))
}

/// Single-frame stage: every decoded frame is enhanced on its own; `L_e` over all four.
pub fn sf_loss_and_grads<T: Real>(models: &Models<T>, s: &SampleTensors<T>, grads: &mut Models<T>) -> Result<StepOutput<T>> {
    s.check()?;
    let n = WINDOW as f64;
    let mut l_e = 0.0;
    let mut per_frame = Vec::with_capacity(WINDOW);
    for (dec, org) in s.decoded.iter().zip(&s.original) {
        let (y, tape) = models.sf.forward_train(dec)?;
        let e = mse(&y, org)?;
        per_frame.push((e, 0.0));
        l_e += e / n;
        models.sf.backward(&tape, &mse_grad(&y, org, 1.0 / n), &mut grads.sf)?;
    }
    Ok(StepOutput { loss: LossBreakdown::new(l_e, 0.0), per_frame, flow_tapes: Vec::new() })
}

pub struct FrameOutcome<T> {
    /// Unclamped multi-frame output.
    pub enhanced: Tensor<T>,
    pub l_e: f64,
    pub l_w: f64,
    pub flow_tape: FlowTape<T>,
}

/// One recurrent step: forward, losses, and backward with the given loss weights.
/// `state` is the previous enhanced frame and is treated as a constant.
#[allow(clippy::too_many_arguments)]
pub fn mf_frame<T: Real>(
    models: &Models<T>,
    state: &Tensor<T>,
    prev_decoded: &Tensor<T>,
    decoded: &Tensor<T>,
    original: &Tensor<T>,
    e_weight: f64,
    w_weight: f64,
    grads: &mut Models<T>,
) -> Result<FrameOutcome<T>> {
    let (flow, flow_tape) = models.flow.forward_taped(prev_decoded, decoded, NormMode::Train)?;
    let predicted = warp_tensor(state, &flow)?;
    let x = Tensor::concat(&[&predicted, decoded])?;
    let (enhanced, tape) = models.mf.forward_train(&x)?;
    let l_e = mse(&enhanced, original)?;
    let l_w = mae(&predicted, decoded)?;

    if e_weight != 0.0 || w_weight != 0.0 {
        let dx = models.mf.backward(&tape, &mse_grad(&enhanced, original, e_weight), &mut grads.mf)?;
        let mut d_pred = dx.channels(0, CHANNELS);
        d_pred.add_assign(&mae_grad(&predicted, decoded, w_weight));
        let (_, d_flow) = warp_tensor_backward(state, &flow, &d_pred)?;
        models.flow.backward(&flow_tape, &d_flow, &mut grads.flow)?;
    }
    Ok(FrameOutcome { enhanced, l_e, l_w, flow_tape })
}

/// The frozen I-frame enhancement that seeds the recurrence.
pub fn i_frame_state<T: Real>(models: &Models<T>, decoded: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(clamp01(&models.sf.enhance(decoded)?))
}

/// Multi-frame stage over the three P frames. `active[t-1]` selects which
/// frames contribute to the loss (and hence the gradient).
pub fn mf_loss_and_grads<T: Real>(
    models: &Models<T>,
    s: &SampleTensors<T>,
    grads: &mut Models<T>,
    active: [bool; WINDOW - 1],
) -> Result<StepOutput<T>> {
    s.check()?;
    let n = (WINDOW - 1) as f64;
    let mut state = i_frame_state(models, &s.decoded[0])?;
    let (mut l_e, mut l_w) = (0.0, 0.0);
    let mut per_frame = Vec::with_capacity(WINDOW - 1);
    let mut flow_tapes = Vec::with_capacity(WINDOW - 1);
    for t in 1..WINDOW {
        let on = active[t - 1];
        let (we, ww) = if on { (1.0 / n, 1.0) } else { (0.0, 0.0) };
        let out = mf_frame(models, &state, &s.decoded[t - 1], &s.decoded[t], &s.original[t], we, ww, grads)?;
        per_frame.push((out.l_e, out.l_w));
        if on {
            l_e += out.l_e / n;
            l_w += out.l_w;
        }
        flow_tapes.push(out.flow_tape);
        state = clamp01(&out.enhanced);
    }
    Ok(StepOutput { loss: LossBreakdown::new(l_e, l_w), per_frame, flow_tapes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_params;
    use crate::nn::{Conv2d, LayerSpec, Parameterized};
    use crate::pipeline::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn live_models<T: Real>(seed: u64) -> Models<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Models::new(ModelConfig { resblocks: 1, ..ModelConfig::reduced(4, 2) }, &mut rng).unwrap();
        for e in [&mut m.sf, &mut m.mf] {
            e.head = Conv2d::new(LayerSpec::conv(4, 3, 3, 1), &mut rng).unwrap();
        }
        let c = m.flow.predict_final.in_channels;
        m.flow.predict_final = Conv2d::new(LayerSpec::conv(c, 8, 3, 1), &mut rng).unwrap();
        // Keep batch-norm outputs off the ReLU kink, which a 1×1 map in train mode would sit on.
        m.flow.visit_mut("", &mut |name, p| {
            if name.ends_with("bn.beta") {
                p.data.iter_mut().for_each(|v| *v = T::from_f64(rng.random_range(0.05..0.3)));
            }
        });
        m
    }

    fn sample<T: Real>(seed: u64, size: usize) -> SampleTensors<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let original: Vec<Tensor<T>> = (0..WINDOW).map(|_| Tensor::uniform(3, size, size, 0.1, 0.9, &mut rng)).collect();
        let decoded = original
            .iter()
            .map(|o| {
                let noise = Tensor::<T>::uniform(3, size, size, -0.1, 0.1, &mut rng);
                let mut d = o.clone();
                d.add_assign(&noise);
                d
            })
            .collect();
        SampleTensors { original, decoded }
    }

    #[test]
    fn sf_frozen_and_truncated() {
        let models = live_models::<f32>(0);
        let s = sample(1, 16);
        let mut full = models.zeroed();
        let out = mf_loss_and_grads(&models, &s, &mut full, [false, false, true]).unwrap();
        assert_eq!(full.sf.trainable_norm(), 0.0);
        assert!(full.mf.trainable_norm() > 0.0);
        assert_eq!(out.loss.l, out.loss.l_e + out.loss.l_w);

        // Replay the state entering frame 3 and differentiate that step alone.
        let mut scratch = models.zeroed();
        let mut state = i_frame_state(&models, &s.decoded[0]).unwrap();
        for t in 1..3 {
            let o = mf_frame(&models, &state, &s.decoded[t - 1], &s.decoded[t], &s.original[t], 0.0, 0.0, &mut scratch).unwrap();
            state = clamp01(&o.enhanced);
        }
        assert_eq!(scratch.trainable_norm(), 0.0);
        let mut isolated = models.zeroed();
        mf_frame(&models, &state, &s.decoded[2], &s.decoded[3], &s.original[3], 1.0 / 3.0, 1.0, &mut isolated).unwrap();
        assert_eq!(full, isolated);
    }

    #[test]
    fn sf_stage_touches_only_sf() {
        let models = live_models::<f32>(2);
        let mut g = models.zeroed();
        let out = sf_loss_and_grads(&models, &sample(3, 16), &mut g).unwrap();
        assert_eq!(out.per_frame.len(), 4);
        assert_eq!(out.loss.l_w, 0.0);
        assert!(g.sf.trainable_norm() > 0.0);
        assert_eq!(g.mf.trainable_norm() + g.flow.trainable_norm(), 0.0);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let models = live_models::<f64>(4);
        let s = sample::<f64>(5, 16);
        let mut g = models.zeroed();
        mf_loss_and_grads(&models, &s, &mut g, [true; 3]).unwrap();
        // The oracle holds each step's incoming state fixed, as training does.
        let mut states = vec![i_frame_state(&models, &s.decoded[0]).unwrap()];
        for t in 1..WINDOW - 1 {
            let mut scratch = models.zeroed();
            let o = mf_frame(&models, &states[t - 1], &s.decoded[t - 1], &s.decoded[t], &s.original[t], 0.0, 0.0, &mut scratch).unwrap();
            states.push(clamp01(&o.enhanced));
        }
        let loss = |m: &Models<f64>| {
            let mut scratch = m.zeroed();
            (1..WINDOW)
                .map(|t| {
                    let o = mf_frame(m, &states[t - 1], &s.decoded[t - 1], &s.decoded[t], &s.original[t], 0.0, 0.0, &mut scratch).unwrap();
                    o.l_e / 3.0 + o.l_w
                })
                .sum::<f64>()
        };
        let report = check_params("pipeline", &models, &g, 2, 1e-6, 1e-3, loss);
        assert!(report.passed, "{report:?}");
    }
}
