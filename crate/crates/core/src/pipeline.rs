//! Frame-recurrent enhancement of IPPP clips.
//!
//! The I frame is enhanced on its own. Each P frame is enhanced from the
//! concatenation of its decoded pixels and a prediction obtained by warping
//! the previous *enhanced* frame with flow estimated between the two
//! *decoded* frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::enhancer::{Enhancer, EnhancerConfig};
use crate::error::{shape_err, QenetError, Result};
use crate::flownet::{FlowNet, FlowNetConfig};
use crate::frame::{clamp_pixels, crop_to_record, pad_to_multiple, Flow, Frame, FrameKind, Variant, CHANNELS};
use crate::nn::param::join;
use crate::nn::{Param, Parameterized};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::warp::warp_tensor;

/// Spatial multiple required by the enhancer's stride-4 branch.
pub const ENHANCER_MULTIPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enhancer_width: usize,
    pub resblocks: usize,
    pub flow: FlowNetConfig,
}

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig { enhancer_width: EnhancerConfig::FULL_WIDTH, resblocks: EnhancerConfig::RESBLOCKS, flow: FlowNetConfig::full() }
    }

    /// Half-width flow net, full enhancer.
    pub fn small() -> Self {
        ModelConfig { flow: FlowNetConfig::small(), ..Self::full() }
    }

    pub fn reduced(enhancer_width: usize, flow_base: usize) -> Self {
        ModelConfig { enhancer_width, resblocks: EnhancerConfig::RESBLOCKS, flow: FlowNetConfig::reduced(flow_base) }
    }

    pub fn single_frame(&self) -> EnhancerConfig {
        EnhancerConfig { resblocks: self.resblocks, ..EnhancerConfig::single_frame(self.enhancer_width) }
    }

    pub fn multi_frame(&self) -> EnhancerConfig {
        EnhancerConfig { resblocks: self.resblocks, ..EnhancerConfig::multi_frame(self.enhancer_width) }
    }
}

/// The three networks: single-frame enhancer for I frames, multi-frame
/// enhancer for P frames, and the flow estimator. Parameters are not shared.
#[derive(Debug, Clone, PartialEq)]
pub struct Models<T> {
    pub config: ModelConfig,
    pub sf: Enhancer<T>,
    pub mf: Enhancer<T>,
    pub flow: FlowNet<T>,
}

impl<T: Real> Models<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Models {
            config,
            sf: Enhancer::new(config.single_frame(), rng)?,
            mf: Enhancer::new(config.multi_frame(), rng)?,
            flow: FlowNet::new(config.flow, rng)?,
        })
    }
}

impl<T: Real> Models<T> {
    /// Replaces the multi-frame enhancer with the single-frame one, widened to
    /// take the prediction channels with zero weight. Training then starts from
    /// the single-frame behaviour instead of from scratch.
    pub fn warm_start_mf(&mut self) {
        self.mf = self.sf.with_leading_inputs(CHANNELS);
    }
}

impl<T: Real> Parameterized<T> for Models<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.sf.visit(&join(prefix, "sf"), f);
        self.mf.visit(&join(prefix, "mf"), f);
        self.flow.visit(&join(prefix, "flow"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.sf.visit_mut(&join(prefix, "sf"), f);
        self.mf.visit_mut(&join(prefix, "mf"), f);
        self.flow.visit_mut(&join(prefix, "flow"), f);
    }
}

/// Recurrence carried between frames. Frames are held at the padded size.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub prev_decoded: Frame,
    pub prev_enhanced: Frame,
    /// Index of the most recently enhanced frame.
    pub t: usize,
}

fn enhance_padded(net: &Enhancer<f32>, x: &Tensor<f32>, like: &Frame) -> Result<Frame> {
    let y = net.enhance(x)?;
    let out = Frame { pixels: y, index: like.index, kind: like.kind, variant: Variant::Enhanced, crop: like.crop };
    clamp_pixels(&out)
}

fn output(frame: &Frame) -> Result<Frame> {
    crop_to_record(frame)
}

/// Enhances one frame in isolation with the single-frame network.
pub fn enhance_single(frame: &Frame, sf: &Enhancer<f32>) -> Result<Frame> {
    let padded = pad_to_multiple(frame, ENHANCER_MULTIPLE);
    output(&enhance_padded(sf, &padded.pixels, &padded)?)
}

/// Starts a recurrence at an I frame.
pub fn begin(decoded: &Frame, models: &Models<f32>) -> Result<(Frame, RecurrentState)> {
    if decoded.kind != FrameKind::I || decoded.index != 0 {
        return Err(QenetError::Gop(format!("recurrence must start at I frame 0, got {:?} {}", decoded.kind, decoded.index)));
    }
    let padded = pad_to_multiple(decoded, ENHANCER_MULTIPLE);
    let enhanced = enhance_padded(&models.sf, &padded.pixels, &padded)?;
    let out = output(&enhanced)?;
    Ok((out, RecurrentState { prev_decoded: padded, prev_enhanced: enhanced, t: decoded.index }))
}

/// Enhances the next P frame. Also returns the flow that was estimated.
pub fn step_traced(state: &RecurrentState, decoded: &Frame, models: &Models<f32>) -> Result<(Frame, RecurrentState, Flow)> {
    if decoded.index != state.t + 1 {
        return Err(QenetError::Gop(format!("state at t={} cannot take frame {}", state.t, decoded.index)));
    }
    if decoded.kind != FrameKind::P {
        return Err(QenetError::Gop(format!("frame {} is not a P frame", decoded.index)));
    }
    let padded = pad_to_multiple(decoded, ENHANCER_MULTIPLE);
    if padded.pixels.shape() != state.prev_decoded.pixels.shape() {
        return Err(shape_err!(
            "frame {} is {:?}, recurrence is {:?}",
            decoded.index,
            padded.pixels.shape(),
            state.prev_decoded.pixels.shape()
        ));
    }
    let vectors = models.flow.infer(&state.prev_decoded.pixels, &padded.pixels)?;
    let predicted = warp_tensor(&state.prev_enhanced.pixels, &vectors)?;
    let x = Tensor::concat(&[&predicted, &padded.pixels])?;
    let enhanced = enhance_padded(&models.mf, &x, &padded)?;
    let out = output(&enhanced)?;
    let flow = Flow { vectors, src_index: state.t, dst_index: decoded.index };
    Ok((out, RecurrentState { prev_decoded: padded, prev_enhanced: enhanced, t: decoded.index }, flow))
}

pub fn step(state: &RecurrentState, decoded: &Frame, models: &Models<f32>) -> Result<(Frame, RecurrentState)> {
    let (out, next, _) = step_traced(state, decoded, models)?;
    Ok((out, next))
}

/// Enhanced frames plus every flow estimated along the way.
#[derive(Debug, Clone)]
pub struct ClipTrace {
    pub frames: Vec<Frame>,
    pub flows: Vec<Flow>,
}

pub fn enhance_clip_traced(decoded: &[Frame], models: &Models<f32>) -> Result<ClipTrace> {
    let first = decoded.first().ok_or_else(|| QenetError::InvalidArgument("empty clip".into()))?;
    let (out, mut state) = begin(first, models)?;
    let mut frames = vec![out];
    let mut flows = Vec::new();
    for frame in &decoded[1..] {
        let (out, next, flow) = step_traced(&state, frame, models)?;
        frames.push(out);
        flows.push(flow);
        state = next;
    }
    Ok(ClipTrace { frames, flows })
}

pub fn enhance_clip(decoded: &[Frame], models: &Models<f32>) -> Result<Vec<Frame>> {
    Ok(enhance_clip_traced(decoded, models)?.frames)
}

/// Every frame through the single-frame network; no recurrence.
pub fn enhance_clip_single(decoded: &[Frame], sf: &Enhancer<f32>) -> Result<Vec<Frame>> {
    decoded.iter().map(|f| enhance_single(f, sf)).collect()
}
