//! Six-scale encoder–decoder optical flow estimator.
//!
//! The encoder halves the resolution six times (kernels 7, 5, 5, 3, 3, 3),
//! each convolution followed by batch norm and ReLU. The decoder walks back
//! up through five levels: at each level the coarser features are deconvolved
//! ×2, the coarser flow is upsampled ×2, and both are concatenated with the
//! same-scale encoder features. Levels 5..2 predict an intermediate flow; the
//! finest level predicts four sub-pixel flows per location which a pixel
//! shuffle rearranges into the full-resolution field.
//!
//! Flow values are in pixels of the grid they are predicted on, so every ×2
//! upsampling doubles them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::frame::{Flow, Frame, CHANNELS};
use crate::nn::param::join;
use crate::nn::{
    pixel_shuffle, pixel_unshuffle, relu, relu_backward, BatchNorm2d, BnCache, Conv2d, ConvTranspose2d, LayerSpec, NormMode, Param,
    Parameterized,
};
use crate::real::Real;
use crate::tensor::Tensor;

pub const LEVELS: usize = 6;
/// Inputs are padded internally to a multiple of this.
pub const PAD_MULTIPLE: usize = 1 << LEVELS;
const KERNELS: [usize; LEVELS] = [7, 5, 5, 3, 3, 3];
const LADDER: [usize; LEVELS] = [1, 2, 4, 8, 8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowNetConfig {
    /// Width of the first encoder stage; later stages scale by 1, 2, 4, 8, 8, 16.
    pub base: usize,
}

impl FlowNetConfig {
    pub fn full() -> Self {
        FlowNetConfig { base: 64 }
    }

    pub fn small() -> Self {
        FlowNetConfig { base: 32 }
    }

    pub fn reduced(base: usize) -> Self {
        FlowNetConfig { base }
    }

    pub fn encoder_channels(&self) -> [usize; LEVELS] {
        LADDER.map(|m| m * self.base)
    }

    /// Deconvolved feature width arriving at level `l` (1..=5).
    fn up_channels(&self, l: usize) -> usize {
        (self.encoder_channels()[l - 1] / 2).max(2)
    }

    /// Width of the concatenation at level `l` (1..=5).
    fn cat_channels(&self, l: usize) -> usize {
        self.encoder_channels()[l - 1] + self.up_channels(l) + 2
    }
}

/// A layer that can sit under a [`NormBlock`].
pub trait Linear<T: Real>: Parameterized<T> {
    fn fwd(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn bwd(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>>;
}

impl<T: Real> Linear<T> for Conv2d<T> {
    fn fwd(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x)
    }
    fn bwd(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        self.backward(x, dy, grad)
    }
}

impl<T: Real> Linear<T> for ConvTranspose2d<T> {
    fn fwd(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x)
    }
    fn bwd(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        self.backward(x, dy, grad)
    }
}

/// Linear layer followed by batch norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct NormBlock<L, T> {
    pub layer: L,
    pub bn: BatchNorm2d<T>,
}

struct NormBlockTape<T> {
    x: Tensor<T>,
    bn: BnCache<T>,
    y: Tensor<T>,
}

impl<T: Real, L: Linear<T>> NormBlock<L, T> {
    fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<(Tensor<T>, BnCache<T>)> {
        let (z, cache) = self.bn.normalize(&self.layer.fwd(x)?, mode)?;
        Ok((relu(&z), cache))
    }

    fn forward_taped(&self, x: &Tensor<T>, mode: NormMode) -> Result<(Tensor<T>, NormBlockTape<T>)> {
        let (y, bn) = self.forward(x, mode)?;
        Ok((y.clone(), NormBlockTape { x: x.clone(), bn, y }))
    }

    fn backward(&self, tape: &NormBlockTape<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let d = relu_backward(&tape.y, dy);
        let d = self.bn.backward(&tape.bn, &d, &mut grad.bn)?;
        self.layer.bwd(&tape.x, &d, &mut grad.layer)
    }
}

impl<T: Real, L: Linear<T>> Parameterized<T> for NormBlock<L, T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.layer.visit(&join(prefix, "layer"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.layer.visit_mut(&join(prefix, "layer"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Learnable ×2 flow upsampler: a bilinear-initialized deconvolution over an
/// edge-replicated border, with values doubled to stay in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowUpsampler<T> {
    pub deconv: ConvTranspose2d<T>,
}

impl<T: Real> FlowUpsampler<T> {
    pub fn bilinear() -> Result<Self> {
        Ok(FlowUpsampler { deconv: ConvTranspose2d::bilinear(2, 2)? })
    }

    pub fn forward(&self, flow: &Tensor<T>) -> Result<Tensor<T>> {
        let up = self.deconv.forward(&flow.pad_edges(1))?;
        let mut out = up.crop(2, 2, 2 * flow.h, 2 * flow.w)?;
        out.scale(T::from_f64(2.0));
        Ok(out)
    }

    pub fn backward(&self, flow: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let mut d = dy.embed(2, 2, 2 * flow.h + 4, 2 * flow.w + 4);
        d.scale(T::from_f64(2.0));
        let dp = self.deconv.backward(&flow.pad_edges(1), &d, &mut grad.deconv)?;
        Ok(Tensor::pad_edges_backward(&dp, 1))
    }
}

impl<T: Real> Parameterized<T> for FlowUpsampler<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.deconv.visit(&join(prefix, "deconv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.deconv.visit_mut(&join(prefix, "deconv"), f);
    }
}

/// Upsamples a flow field ×2 with the bilinear-equivalent initialization.
pub fn upsample_flow(flow: &Flow) -> Result<Flow> {
    let vectors = FlowUpsampler::<f32>::bilinear()?.forward(&flow.vectors)?;
    Ok(Flow { vectors, ..flow.clone() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowNet<T> {
    pub config: FlowNetConfig,
    pub encoder: Vec<NormBlock<Conv2d<T>, T>>,
    pub predict_coarsest: Conv2d<T>,
    /// Indexed by decoder step: entry 0 serves level 5, entry 4 level 1.
    pub up_features: Vec<NormBlock<ConvTranspose2d<T>, T>>,
    pub up_flows: Vec<FlowUpsampler<T>>,
    /// Flow predictors for levels 5..2.
    pub predict: Vec<Conv2d<T>>,
    /// Four sub-pixel flows per level-1 location, zero-initialized.
    pub predict_final: Conv2d<T>,
}

/// Forward activations for one flow estimation.
pub struct FlowTape<T> {
    height: usize,
    width: usize,
    encoder: Vec<NormBlockTape<T>>,
    up_features: Vec<NormBlockTape<T>>,
    /// Concatenations at levels 5..1 (decoder order).
    cats: Vec<Tensor<T>>,
    /// Flows at levels 6..2.
    flows: Vec<Tensor<T>>,
}

impl<T: Real> FlowNet<T> {
    pub fn new(config: FlowNetConfig, rng: &mut impl Rng) -> Result<Self> {
        let enc = config.encoder_channels();
        let mut encoder = Vec::with_capacity(LEVELS);
        let mut cin = 2 * CHANNELS;
        for (i, &cout) in enc.iter().enumerate() {
            encoder.push(NormBlock { layer: Conv2d::new(LayerSpec::conv(cin, cout, KERNELS[i], 2), rng)?, bn: BatchNorm2d::new(cout) });
            cin = cout;
        }
        let mut up_features = Vec::new();
        let mut up_flows = Vec::new();
        let mut predict = Vec::new();
        let mut feat = enc[LEVELS - 1];
        for l in (1..LEVELS).rev() {
            let up = config.up_channels(l);
            up_features.push(NormBlock { layer: ConvTranspose2d::new(LayerSpec::deconv(feat, up, 2), rng)?, bn: BatchNorm2d::new(up) });
            up_flows.push(FlowUpsampler::bilinear()?);
            feat = config.cat_channels(l);
            if l >= 2 {
                predict.push(Conv2d::new(LayerSpec::conv(feat, 2, 3, 1), rng)?);
            }
        }
        let mut predict_final = Conv2d::new(LayerSpec::conv(feat, 8, 3, 1), rng)?;
        predict_final.fill_zero();
        Ok(FlowNet {
            config,
            encoder,
            predict_coarsest: Conv2d::new(LayerSpec::conv(enc[LEVELS - 1], 2, 3, 1), rng)?,
            up_features,
            up_flows,
            predict,
            predict_final,
        })
    }

    fn input(prev: &Tensor<T>, curr: &Tensor<T>) -> Result<Tensor<T>> {
        if !prev.same_shape(curr) || prev.c != CHANNELS {
            return Err(shape_err!("flow inputs {:?} and {:?}", prev.shape(), curr.shape()));
        }
        if prev.h == 0 || prev.w == 0 {
            return Err(shape_err!("flow inputs are empty"));
        }
        let x = Tensor::concat(&[prev, curr])?;
        Ok(x.pad_replicate(prev.h.next_multiple_of(PAD_MULTIPLE), prev.w.next_multiple_of(PAD_MULTIPLE)))
    }

    /// Flow (2×H×W, channel 0 horizontal) from `prev` to `curr`, with the
    /// activations needed by [`FlowNet::backward`]. Train-mode batch
    /// statistics are kept in the tape; see [`FlowNet::commit_stats`].
    pub fn forward_taped(&self, prev: &Tensor<T>, curr: &Tensor<T>, mode: NormMode) -> Result<(Tensor<T>, FlowTape<T>)> {
        let x = Self::input(prev, curr)?;
        let mut encoder = Vec::with_capacity(LEVELS);
        let mut feats = Vec::with_capacity(LEVELS);
        let mut h = x;
        for block in &self.encoder {
            let (y, tape) = block.forward_taped(&h, mode)?;
            encoder.push(tape);
            feats.push(y.clone());
            h = y;
        }
        let mut flow = self.predict_coarsest.forward(&h)?;
        let mut flows = vec![flow.clone()];
        let mut up_features = Vec::new();
        let mut cats = Vec::new();
        for (step, l) in (1..LEVELS).rev().enumerate() {
            let (uf, tape) = self.up_features[step].forward_taped(&h, mode)?;
            up_features.push(tape);
            let ufl = self.up_flows[step].forward(&flow)?;
            let cat = Tensor::concat(&[&feats[l - 1], &uf, &ufl])?;
            if l >= 2 {
                flow = self.predict[step].forward(&cat)?;
                flows.push(flow.clone());
            }
            cats.push(cat.clone());
            h = cat;
        }
        let mut out = pixel_shuffle(&self.predict_final.forward(&h)?, 2)?;
        out.scale(T::from_f64(2.0));
        let out = out.crop(0, 0, prev.h, prev.w)?;
        Ok((out, FlowTape { height: prev.h, width: prev.w, encoder, up_features, cats, flows }))
    }

    /// Eval-mode (running statistics) flow estimate.
    pub fn infer(&self, prev: &Tensor<T>, curr: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_taped(prev, curr, NormMode::Eval)?.0)
    }

    /// Folds the train-mode batch statistics recorded in `tape` into the running estimates.
    pub fn commit_stats(&mut self, tape: &FlowTape<T>) {
        for (block, t) in self.encoder.iter_mut().zip(&tape.encoder) {
            block.bn.update_running(&t.bn);
        }
        for (block, t) in self.up_features.iter_mut().zip(&tape.up_features) {
            block.bn.update_running(&t.bn);
        }
    }

    /// Accumulates parameter gradients; returns gradients w.r.t. `(prev, curr)`.
    pub fn backward(&self, tape: &FlowTape<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<(Tensor<T>, Tensor<T>)> {
        if dy.shape() != (2, tape.height, tape.width) {
            return Err(shape_err!("flow backward got {:?}", dy.shape()));
        }
        let finest = tape.cats.last().expect("five decoder levels");
        let (ph, pw) = (2 * finest.h, 2 * finest.w);
        let mut d = dy.embed(0, 0, ph, pw);
        d.scale(T::from_f64(2.0));
        let d = pixel_unshuffle(&d, 2)?;
        let mut d_cat = self.predict_final.backward(finest, &d, &mut grad.predict_final)?;
        let mut d_flow: Option<Tensor<T>> = None;
        let mut d_enc: Vec<Option<Tensor<T>>> = vec![None; LEVELS];
        let enc = self.config.encoder_channels();

        for l in 1..LEVELS {
            let step = LEVELS - 1 - l;
            let cat = &tape.cats[step];
            if l >= 2 {
                let df = d_flow.take().expect("flow gradient from finer level");
                d_cat.add_assign(&self.predict[step].backward(cat, &df, &mut grad.predict[step])?);
            }
            let mut parts = d_cat.split(&[enc[l - 1], self.config.up_channels(l), 2])?.into_iter();
            let (de, duf, dufl) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
            accumulate(&mut d_enc[l - 1], de);
            let coarser_flow = &tape.flows[LEVELS - 1 - l];
            d_flow = Some(self.up_flows[step].backward(coarser_flow, &dufl, &mut grad.up_flows[step])?);
            d_cat = self.up_features[step].backward(&tape.up_features[step], &duf, &mut grad.up_features[step])?;
        }
        // d_cat now holds the gradient w.r.t. the deepest encoder output.
        let coarsest = &tape.encoder[LEVELS - 1].y;
        let df = d_flow.take().expect("coarsest flow gradient");
        d_cat.add_assign(&self.predict_coarsest.backward(coarsest, &df, &mut grad.predict_coarsest)?);
        accumulate(&mut d_enc[LEVELS - 1], d_cat);

        let mut dx = None;
        for i in (0..LEVELS).rev() {
            let Some(di) = d_enc[i].take() else { continue };
            let dprev = self.encoder[i].backward(&tape.encoder[i], &di, &mut grad.encoder[i])?;
            match i {
                0 => dx = Some(dprev),
                _ => accumulate(&mut d_enc[i - 1], dprev),
            }
        }
        let dx = dx.expect("encoder input gradient");
        let dx = Tensor::pad_replicate_backward(&dx, tape.height, tape.width);
        let mut halves = dx.split(&[CHANNELS, CHANNELS])?.into_iter();
        Ok((halves.next().unwrap(), halves.next().unwrap()))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Real> Parameterized<T> for FlowNet<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.predict_coarsest.visit(&join(prefix, "predict_coarsest"), f);
        self.up_features.visit(&join(prefix, "up_features"), f);
        self.up_flows.visit(&join(prefix, "up_flows"), f);
        self.predict.visit(&join(prefix, "predict"), f);
        self.predict_final.visit(&join(prefix, "predict_final"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.predict_coarsest.visit_mut(&join(prefix, "predict_coarsest"), f);
        self.up_features.visit_mut(&join(prefix, "up_features"), f);
        self.up_flows.visit_mut(&join(prefix, "up_flows"), f);
        self.predict.visit_mut(&join(prefix, "predict"), f);
        self.predict_final.visit_mut(&join(prefix, "predict_final"), f);
    }
}

/// Flow from decoded frame `prev` to decoded frame `curr`, using running batch-norm statistics.
pub fn estimate_flow(prev: &Frame, curr: &Frame, net: &FlowNet<f32>) -> Result<Flow> {
    if prev.dims() != curr.dims() {
        return Err(shape_err!("flow between {:?} and {:?}", prev.dims(), curr.dims()));
    }
    Ok(Flow { vectors: net.infer(&prev.pixels, &curr.pixels)?, src_index: prev.index, dst_index: curr.index })
}
