//! Multi-scale enhancement network.
//!
//! Three branches see the input at full, half and quarter resolution through
//! stride-1/2/4 entry convolutions (7×7, 5×5, 3×3), each followed by a stack
//! of residual blocks. Branch outputs are fused coarse-to-fine with ×2
//! deconvolutions and 3×3 fusion convolutions, and a final 3×3 head predicts
//! a correction that is added to the decoded frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, QenetError, Result};
use crate::frame::CHANNELS;
use crate::nn::param::join;
use crate::nn::{relu, relu_backward, Conv2d, ConvTranspose2d, LayerSpec, Param, Parameterized, ResBlock, ResBlockCache};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancerConfig {
    /// `C` for single-frame use, `2C` for the concatenated (predicted, decoded) pair.
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub resblocks: usize,
}

impl EnhancerConfig {
    pub const FULL_WIDTH: usize = 64;
    pub const RESBLOCKS: usize = 4;

    pub fn single_frame(width: usize) -> Self {
        EnhancerConfig { in_channels: CHANNELS, out_channels: CHANNELS, width, resblocks: Self::RESBLOCKS }
    }

    pub fn multi_frame(width: usize) -> Self {
        EnhancerConfig { in_channels: 2 * CHANNELS, ..Self::single_frame(width) }
    }
}

/// `(H, W)`, `(H/2, W/2)`, `(H/4, W/4)`.
pub fn branch_shapes(h: usize, w: usize) -> [(usize, usize); 3] {
    [(h, w), (h / 2, w / 2), (h / 4, w / 4)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch<T> {
    pub entry: Conv2d<T>,
    pub blocks: Vec<ResBlock<T>>,
}

struct BranchTape<T> {
    activated: Tensor<T>,
    blocks: Vec<ResBlockCache<T>>,
}

impl<T: Real> Branch<T> {
    fn new(cfg: &EnhancerConfig, kernel: usize, stride: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Branch {
            entry: Conv2d::new(LayerSpec::conv(cfg.in_channels, cfg.width, kernel, stride), rng)?,
            blocks: (0..cfg.resblocks).map(|_| ResBlock::new(cfg.width, rng)).collect::<Result<_>>()?,
        })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = relu(&self.entry.forward(x)?);
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }

    fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BranchTape<T>)> {
        let activated = relu(&self.entry.forward(x)?);
        let mut h = activated.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward_cached(&h)?;
            blocks.push(cache);
            h = next;
        }
        Ok((h, BranchTape { activated, blocks }))
    }

    fn backward(&self, x: &Tensor<T>, tape: &BranchTape<T>, dy: Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let mut d = dy;
        for ((b, cache), g) in self.blocks.iter().zip(&tape.blocks).zip(grad.blocks.iter_mut()).rev() {
            d = b.backward(cache, &d, g)?;
        }
        let d = relu_backward(&tape.activated, &d);
        self.entry.backward(x, &d, &mut grad.entry)
    }
}

impl<T: Real> Parameterized<T> for Branch<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.entry.visit(&join(prefix, "entry"), f);
        self.blocks.visit(&join(prefix, "blocks"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.entry.visit_mut(&join(prefix, "entry"), f);
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Enhancer<T> {
    pub config: EnhancerConfig,
    pub full: Branch<T>,
    pub half: Branch<T>,
    pub quarter: Branch<T>,
    pub up_quarter: ConvTranspose2d<T>,
    pub fuse_half: Conv2d<T>,
    pub up_half: ConvTranspose2d<T>,
    pub fuse_full: Conv2d<T>,
    pub head: Conv2d<T>,
}

/// Intermediate activations kept for the backward pass.
pub struct EnhancerTape<T> {
    input: Tensor<T>,
    full: BranchTape<T>,
    half: BranchTape<T>,
    quarter: BranchTape<T>,
    quarter_out: Tensor<T>,
    cat_half: Tensor<T>,
    fused_half: Tensor<T>,
    cat_full: Tensor<T>,
    fused_full: Tensor<T>,
}

impl<T: Real> Enhancer<T> {
    /// Random fan-in init with a zeroed head, so the untrained network returns its skip input.
    pub fn new(config: EnhancerConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.out_channels > config.in_channels {
            return Err(QenetError::InvalidArgument("enhancer skip needs in >= out channels".into()));
        }
        let w = config.width;
        let mut head = Conv2d::new(LayerSpec::conv(w, config.out_channels, 3, 1), rng)?;
        head.fill_zero();
        Ok(Enhancer {
            config,
            full: Branch::new(&config, 7, 1, rng)?,
            half: Branch::new(&config, 5, 2, rng)?,
            quarter: Branch::new(&config, 3, 4, rng)?,
            up_quarter: ConvTranspose2d::new(LayerSpec::deconv(w, w, 2), rng)?,
            fuse_half: Conv2d::new(LayerSpec::conv(2 * w, w, 3, 1), rng)?,
            up_half: ConvTranspose2d::new(LayerSpec::deconv(w, w, 2), rng)?,
            fuse_full: Conv2d::new(LayerSpec::conv(2 * w, w, 3, 1), rng)?,
            head,
        })
    }

    /// A copy taking `extra` additional leading input channels whose entry
    /// weights start at zero, so it computes exactly what `self` does on the
    /// trailing channels.
    pub fn with_leading_inputs(&self, extra: usize) -> Self {
        let widen = |conv: &Conv2d<T>| {
            let (o, i, k) = (conv.out_channels, conv.in_channels, conv.kernel);
            let mut data = vec![T::zero(); o * (i + extra) * k * k];
            for oc in 0..o {
                let src = &conv.weight.data[oc * i * k * k..(oc + 1) * i * k * k];
                let at = (oc * (i + extra) + extra) * k * k;
                data[at..at + src.len()].copy_from_slice(src);
            }
            Conv2d { weight: Param::new(vec![o, i + extra, k, k], data), in_channels: i + extra, ..conv.clone() }
        };
        let mut out = self.clone();
        out.config.in_channels += extra;
        for (dst, src) in [(&mut out.full, &self.full), (&mut out.half, &self.half), (&mut out.quarter, &self.quarter)] {
            dst.entry = widen(&src.entry);
        }
        out
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.c != self.config.in_channels {
            return Err(shape_err!("enhancer expects {} channels, got {}", self.config.in_channels, x.c));
        }
        if !x.h.is_multiple_of(4) || !x.w.is_multiple_of(4) || x.h == 0 || x.w == 0 {
            return Err(shape_err!("enhancer input {}x{} must be a non-empty multiple of 4", x.h, x.w));
        }
        Ok(())
    }

    /// The skip path: the last `out_channels` channels (the decoded frame).
    fn skip(&self, x: &Tensor<T>) -> Tensor<T> {
        x.channels(x.c - self.config.out_channels, self.config.out_channels)
    }

    /// Unclamped enhancement of `x`; output has `out_channels` channels.
    pub fn enhance(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let ff = self.full.forward(x)?;
        let fh = self.half.forward(x)?;
        let fq = self.quarter.forward(x)?;
        let uq = self.up_quarter.forward(&fq)?;
        let gh = relu(&self.fuse_half.forward(&Tensor::concat(&[&uq, &fh])?)?);
        let uh = self.up_half.forward(&gh)?;
        let gf = relu(&self.fuse_full.forward(&Tensor::concat(&[&uh, &ff])?)?);
        let mut out = self.head.forward(&gf)?;
        out.add_assign(&self.skip(x));
        Ok(out)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, EnhancerTape<T>)> {
        self.check(x)?;
        let (ff, full) = self.full.forward_cached(x)?;
        let (fh, half) = self.half.forward_cached(x)?;
        let (fq, quarter) = self.quarter.forward_cached(x)?;
        let uq = self.up_quarter.forward(&fq)?;
        let cat_half = Tensor::concat(&[&uq, &fh])?;
        let fused_half = relu(&self.fuse_half.forward(&cat_half)?);
        let uh = self.up_half.forward(&fused_half)?;
        let cat_full = Tensor::concat(&[&uh, &ff])?;
        let fused_full = relu(&self.fuse_full.forward(&cat_full)?);
        let mut out = self.head.forward(&fused_full)?;
        out.add_assign(&self.skip(x));
        let tape = EnhancerTape { input: x.clone(), full, half, quarter, quarter_out: fq, cat_half, fused_half, cat_full, fused_full };
        Ok((out, tape))
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient.
    pub fn backward(&self, tape: &EnhancerTape<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let w = self.config.width;
        let x = &tape.input;
        let d = self.head.backward(&tape.fused_full, dy, &mut grad.head)?;
        let d = relu_backward(&tape.fused_full, &d);
        let d = self.fuse_full.backward(&tape.cat_full, &d, &mut grad.fuse_full)?;
        let mut parts = d.split(&[w, w])?.into_iter();
        let (d_uh, d_ff) = (parts.next().unwrap(), parts.next().unwrap());
        let d = self.up_half.backward(&tape.fused_half, &d_uh, &mut grad.up_half)?;
        let d = relu_backward(&tape.fused_half, &d);
        let d = self.fuse_half.backward(&tape.cat_half, &d, &mut grad.fuse_half)?;
        let mut parts = d.split(&[w, w])?.into_iter();
        let (d_uq, d_fh) = (parts.next().unwrap(), parts.next().unwrap());
        let d_fq = self.up_quarter.backward(&tape.quarter_out, &d_uq, &mut grad.up_quarter)?;

        let mut dx = self.full.backward(x, &tape.full, d_ff, &mut grad.full)?;
        dx.add_assign(&self.half.backward(x, &tape.half, d_fh, &mut grad.half)?);
        dx.add_assign(&self.quarter.backward(x, &tape.quarter, d_fq, &mut grad.quarter)?);
        let skip_from = (x.c - self.config.out_channels) * x.plane_len();
        for (a, &b) in dx.data[skip_from..].iter_mut().zip(&dy.data) {
            *a += b;
        }
        Ok(dx)
    }
}

impl<T: Real> Parameterized<T> for Enhancer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.full.visit(&join(prefix, "full"), f);
        self.half.visit(&join(prefix, "half"), f);
        self.quarter.visit(&join(prefix, "quarter"), f);
        self.up_quarter.visit(&join(prefix, "up_quarter"), f);
        self.fuse_half.visit(&join(prefix, "fuse_half"), f);
        self.up_half.visit(&join(prefix, "up_half"), f);
        self.fuse_full.visit(&join(prefix, "fuse_full"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.full.visit_mut(&join(prefix, "full"), f);
        self.half.visit_mut(&join(prefix, "half"), f);
        self.quarter.visit_mut(&join(prefix, "quarter"), f);
        self.up_quarter.visit_mut(&join(prefix, "up_quarter"), f);
        self.fuse_half.visit_mut(&join(prefix, "fuse_half"), f);
        self.up_half.visit_mut(&join(prefix, "up_half"), f);
        self.fuse_full.visit_mut(&join(prefix, "fuse_full"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
