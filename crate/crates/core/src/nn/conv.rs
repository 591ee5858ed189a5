//! Strided convolution and transposed convolution via tiled im2col + gemm.

use rand::{Rng, SeedableRng};

use super::param::{join, Param, Parameterized};
use crate::error::{shape_err, QenetError, Result};
use crate::exec;
use crate::real::Real;
use crate::tensor::Tensor;

/// Upper bound on im2col buffer elements per tile.
const TILE_ELEMS: usize = 1 << 21;
/// Output channels handled per parallel gemm task.
const CHANNEL_GROUP: usize = 8;

/// Sliding-window geometry between a dense image and a grid of window positions.
/// For a convolution the grid is the output; for a transposed convolution it is the input.
#[derive(Debug, Clone, Copy)]
struct Window {
    k: usize,
    stride: usize,
    pad: usize,
    img_h: usize,
    img_w: usize,
    grid_h: usize,
    grid_w: usize,
}

impl Window {
    fn tile_rows(&self, channels: usize) -> usize {
        let per_row = channels * self.k * self.k * self.grid_w;
        (TILE_ELEMS / per_row.max(1)).clamp(1, self.grid_h.max(1))
    }

    #[inline]
    fn src(&self, g: usize, off: usize) -> isize {
        (g * self.stride + off) as isize - self.pad as isize
    }
}

fn im2col<T: Real>(img: &[T], channels: usize, win: Window, gy0: usize, gy1: usize, cols: &mut Vec<T>) {
    let kk = win.k * win.k;
    let n = (gy1 - gy0) * win.grid_w;
    cols.clear();
    cols.resize(channels * kk * n, T::zero());
    let plane = win.img_h * win.img_w;
    exec::for_each_chunk_mut(cols, n, |row, out| {
        let c = row / kk;
        let ky = (row / win.k) % win.k;
        let kx = row % win.k;
        let src = &img[c * plane..(c + 1) * plane];
        for gy in gy0..gy1 {
            let iy = win.src(gy, ky);
            if iy < 0 || iy >= win.img_h as isize {
                continue;
            }
            let srow = &src[iy as usize * win.img_w..(iy as usize + 1) * win.img_w];
            let orow = &mut out[(gy - gy0) * win.grid_w..(gy - gy0 + 1) * win.grid_w];
            for (gx, o) in orow.iter_mut().enumerate() {
                let ix = win.src(gx, kx);
                if ix >= 0 && ix < win.img_w as isize {
                    *o = srow[ix as usize];
                }
            }
        }
    });
}

fn col2im<T: Real>(cols: &[T], channels: usize, win: Window, gy0: usize, gy1: usize, img: &mut [T]) {
    let kk = win.k * win.k;
    let n = (gy1 - gy0) * win.grid_w;
    let plane = win.img_h * win.img_w;
    debug_assert_eq!(img.len(), channels * plane);
    exec::for_each_chunk_mut(img, plane, |c, dst| {
        for ky in 0..win.k {
            for kx in 0..win.k {
                let row = &cols[(c * kk + ky * win.k + kx) * n..][..n];
                for gy in gy0..gy1 {
                    let iy = win.src(gy, ky);
                    if iy < 0 || iy >= win.img_h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * win.img_w..(iy as usize + 1) * win.img_w];
                    let crow = &row[(gy - gy0) * win.grid_w..(gy - gy0 + 1) * win.grid_w];
                    for (gx, &v) in crow.iter().enumerate() {
                        let ix = win.src(gx, kx);
                        if ix >= 0 && ix < win.img_w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    });
}

fn add_bias<T: Real>(y: &mut Tensor<T>, bias: &[T]) {
    let n = y.plane_len();
    exec::for_each_chunk_mut(&mut y.data, n, |c, p| {
        let b = bias[c];
        p.iter_mut().for_each(|v| *v += b);
    });
}

fn accumulate_bias_grad<T: Real>(dy: &Tensor<T>, db: &mut [T]) {
    for (c, g) in db.iter_mut().enumerate() {
        *g += dy.plane(c).iter().copied().sum::<T>();
    }
}

/// He-style normal init scaled by fan-in.
fn he_init<T: Real>(n: usize, fan_in: usize, rng: &mut impl Rng) -> Vec<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::<T>::randn(1, 1, n, std, rng).data
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
    ResBlock,
    PixelShuffle,
    BatchNorm,
    Relu,
}

/// Declarative description of one layer, validated before weights are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub upscale_factor: usize,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec { kind: LayerKind::Conv, in_channels, out_channels, kernel, stride, upscale_factor: 1 }
    }

    pub fn deconv(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        LayerSpec { kind: LayerKind::Deconv, in_channels, out_channels, kernel: 2 * stride, stride, upscale_factor: 1 }
    }

    pub fn pixel_shuffle(in_channels: usize, r: usize) -> Self {
        LayerSpec {
            kind: LayerKind::PixelShuffle,
            in_channels,
            out_channels: in_channels / (r * r).max(1),
            kernel: 1,
            stride: 1,
            upscale_factor: r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QenetError::InvalidArgument(m));
        match self.kind {
            LayerKind::Conv => {
                if self.kernel.is_multiple_of(2) {
                    return bad(format!("conv kernel {} must be odd", self.kernel));
                }
                if ![1, 2, 4].contains(&self.stride) {
                    return bad(format!("conv stride {} not in {{1,2,4}}", self.stride));
                }
            }
            LayerKind::Deconv => {
                if ![2, 4].contains(&self.stride) {
                    return bad(format!("deconv stride {} not in {{2,4}}", self.stride));
                }
                if self.kernel != 2 * self.stride {
                    return bad(format!("deconv kernel {} breaks exact x{} sizing", self.kernel, self.stride));
                }
            }
            LayerKind::PixelShuffle => {
                let r2 = self.upscale_factor * self.upscale_factor;
                if self.upscale_factor == 0 || !self.in_channels.is_multiple_of(r2) {
                    return bad(format!("pixel shuffle: {} channels not divisible by {r2}", self.in_channels));
                }
            }
            LayerKind::ResBlock => {
                if self.in_channels != self.out_channels {
                    return bad("resblock must preserve channel count".into());
                }
            }
            LayerKind::BatchNorm | LayerKind::Relu => {}
        }
        Ok(())
    }
}

/// 2-D convolution with symmetric `(k-1)/2` padding; weight layout `[out, in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(spec: LayerSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.kind != LayerKind::Conv {
            return Err(QenetError::InvalidArgument(format!("{:?} is not a conv", spec.kind)));
        }
        spec.validate()?;
        let k = spec.kernel;
        let fan_in = spec.in_channels * k * k;
        let n = spec.out_channels * fan_in;
        Ok(Conv2d {
            weight: Param::new(vec![spec.out_channels, spec.in_channels, k, k], he_init(n, fan_in, rng)),
            bias: Param::zeros(vec![spec.out_channels]),
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: k,
            stride: spec.stride,
        })
    }

    /// All-zero weights and bias.
    pub fn zeros(spec: LayerSpec) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut c = Self::new(spec, &mut rng)?;
        c.fill_zero();
        Ok(c)
    }

    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        ((h + 2 * p - self.kernel) / self.stride + 1, (w + 2 * p - self.kernel) / self.stride + 1)
    }

    fn window(&self, x: &Tensor<T>) -> Window {
        let (gh, gw) = self.output_size(x.h, x.w);
        Window { k: self.kernel, stride: self.stride, pad: self.pad(), img_h: x.h, img_w: x.w, grid_h: gh, grid_w: gw }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c != self.in_channels {
            return Err(shape_err!("conv expects {} input channels, got {}", self.in_channels, x.c));
        }
        if x.h + 2 * self.pad() < self.kernel || x.w + 2 * self.pad() < self.kernel {
            return Err(shape_err!("conv input {}x{} smaller than kernel", x.h, x.w));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let win = self.window(x);
        let (ho, wo) = (win.grid_h, win.grid_w);
        let hw = ho * wo;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let mut y = Tensor::zeros(self.out_channels, ho, wo);
        let tile = win.tile_rows(self.in_channels);
        let mut cols = Vec::new();
        let wdata = &self.weight.data;
        for gy0 in (0..ho).step_by(tile) {
            let gy1 = (gy0 + tile).min(ho);
            im2col(&x.data, x.c, win, gy0, gy1, &mut cols);
            let n = (gy1 - gy0) * wo;
            let off = gy0 * wo;
            let cols = &cols;
            exec::for_each_chunk_mut(&mut y.data, CHANNEL_GROUP * hw, |g, chunk| {
                let c0 = g * CHANNEL_GROUP;
                let cn = chunk.len() / hw;
                T::gemm_strided(cn, kdim, n, T::one(), &wdata[c0 * kdim..], (kdim, 1), cols, (n, 1), T::zero(), &mut chunk[off..], (hw, 1));
            });
        }
        add_bias(&mut y, &self.bias.data);
        Ok(y)
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let win = self.window(x);
        let (ho, wo) = (win.grid_h, win.grid_w);
        if dy.shape() != (self.out_channels, ho, wo) {
            return Err(shape_err!("conv backward: dy {:?}", dy.shape()));
        }
        let hw = ho * wo;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let cout = self.out_channels;
        let mut dx = x.zeros_like();
        let tile = win.tile_rows(self.in_channels);
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        let wdata = &self.weight.data;
        for gy0 in (0..ho).step_by(tile) {
            let gy1 = (gy0 + tile).min(ho);
            let n = (gy1 - gy0) * wo;
            let off = gy0 * wo;
            im2col(&x.data, x.c, win, gy0, gy1, &mut cols);
            let cols_ref = &cols;
            let dyd = &dy.data;
            exec::for_each_chunk_mut(&mut grad.weight.data, CHANNEL_GROUP * kdim, |g, chunk| {
                let c0 = g * CHANNEL_GROUP;
                let cn = chunk.len() / kdim;
                T::gemm_strided(cn, n, kdim, T::one(), &dyd[c0 * hw + off..], (hw, 1), cols_ref, (1, n), T::one(), chunk, (kdim, 1));
            });
            dcols.clear();
            dcols.resize(kdim * n, T::zero());
            let rows_per = CHANNEL_GROUP * self.kernel * self.kernel;
            exec::for_each_chunk_mut(&mut dcols, rows_per * n, |g, chunk| {
                let r0 = g * rows_per;
                let rn = chunk.len() / n;
                T::gemm_strided(rn, cout, n, T::one(), &wdata[r0..], (1, kdim), &dyd[off..], (hw, 1), T::zero(), chunk, (n, 1));
            });
            col2im(&dcols, x.c, win, gy0, gy1, &mut dx.data);
        }
        accumulate_bias_grad(dy, &mut grad.bias.data);
        Ok(dx)
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed convolution producing exactly `stride·H × stride·W`
/// (kernel `2·stride`, padding `stride/2`); weight layout `[in, out, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(spec: LayerSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.kind != LayerKind::Deconv {
            return Err(QenetError::InvalidArgument(format!("{:?} is not a deconv", spec.kind)));
        }
        spec.validate()?;
        let k = spec.kernel;
        let n = spec.in_channels * spec.out_channels * k * k;
        let fan_in = spec.in_channels * (k / spec.stride).pow(2);
        Ok(ConvTranspose2d {
            weight: Param::new(vec![spec.in_channels, spec.out_channels, k, k], he_init(n, fan_in, rng)),
            bias: Param::zeros(vec![spec.out_channels]),
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: k,
            stride: spec.stride,
        })
    }

    /// Channel-diagonal bilinear interpolation kernel (requires `in == out`).
    pub fn bilinear(channels: usize, stride: usize) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut d = Self::new(LayerSpec::deconv(channels, channels, stride), &mut rng)?;
        d.fill_zero();
        let k = d.kernel;
        let f = k.div_ceil(2) as f64;
        let center = (2.0 * f - 1.0 - (f % 2.0)) / (2.0 * f);
        let tap = |i: usize| 1.0 - (i as f64 / f - center).abs();
        for c in 0..channels {
            for ky in 0..k {
                for kx in 0..k {
                    let i = ((c * channels + c) * k + ky) * k + kx;
                    d.weight.data[i] = T::from_f64(tap(ky) * tap(kx));
                }
            }
        }
        Ok(d)
    }

    pub fn pad(&self) -> usize {
        self.stride / 2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h * self.stride, w * self.stride)
    }

    fn window(&self, h: usize, w: usize) -> Window {
        let (ho, wo) = self.output_size(h, w);
        Window { k: self.kernel, stride: self.stride, pad: self.pad(), img_h: ho, img_w: wo, grid_h: h, grid_w: w }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.c != self.in_channels {
            return Err(shape_err!("deconv expects {} input channels, got {}", self.in_channels, x.c));
        }
        let win = self.window(x.h, x.w);
        let okk = self.out_channels * self.kernel * self.kernel;
        let hw = x.h * x.w;
        let cin = self.in_channels;
        let mut y = Tensor::zeros(self.out_channels, win.img_h, win.img_w);
        let tile = win.tile_rows(self.out_channels);
        let mut cols = Vec::new();
        let wdata = &self.weight.data;
        for gy0 in (0..x.h).step_by(tile) {
            let gy1 = (gy0 + tile).min(x.h);
            let n = (gy1 - gy0) * x.w;
            let off = gy0 * x.w;
            cols.clear();
            cols.resize(okk * n, T::zero());
            let rows_per = CHANNEL_GROUP * self.kernel * self.kernel;
            let xd = &x.data;
            exec::for_each_chunk_mut(&mut cols, rows_per * n, |g, chunk| {
                let r0 = g * rows_per;
                let rn = chunk.len() / n;
                T::gemm_strided(rn, cin, n, T::one(), &wdata[r0..], (1, okk), &xd[off..], (hw, 1), T::zero(), chunk, (n, 1));
            });
            col2im(&cols, self.out_channels, win, gy0, gy1, &mut y.data);
        }
        add_bias(&mut y, &self.bias.data);
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let win = self.window(x.h, x.w);
        if x.c != self.in_channels || dy.shape() != (self.out_channels, win.img_h, win.img_w) {
            return Err(shape_err!("deconv backward: x {:?}, dy {:?}", x.shape(), dy.shape()));
        }
        let okk = self.out_channels * self.kernel * self.kernel;
        let hw = x.h * x.w;
        let mut dx = x.zeros_like();
        let tile = win.tile_rows(self.out_channels);
        let mut cols = Vec::new();
        let wdata = &self.weight.data;
        for gy0 in (0..x.h).step_by(tile) {
            let gy1 = (gy0 + tile).min(x.h);
            let n = (gy1 - gy0) * x.w;
            let off = gy0 * x.w;
            im2col(&dy.data, self.out_channels, win, gy0, gy1, &mut cols);
            let cols_ref = &cols;
            exec::for_each_chunk_mut(&mut dx.data, CHANNEL_GROUP * hw, |g, chunk| {
                let c0 = g * CHANNEL_GROUP;
                let cn = chunk.len() / hw;
                T::gemm_strided(
                    cn,
                    okk,
                    n,
                    T::one(),
                    &wdata[c0 * okk..],
                    (okk, 1),
                    cols_ref,
                    (n, 1),
                    T::zero(),
                    &mut chunk[off..],
                    (hw, 1),
                );
            });
            let xd = &x.data;
            exec::for_each_chunk_mut(&mut grad.weight.data, CHANNEL_GROUP * okk, |g, chunk| {
                let c0 = g * CHANNEL_GROUP;
                let cn = chunk.len() / okk;
                T::gemm_strided(cn, n, okk, T::one(), &xd[c0 * hw + off..], (hw, 1), cols_ref, (1, n), T::one(), chunk, (okk, 1));
            });
        }
        accumulate_bias_grad(dy, &mut grad.bias.data);
        Ok(dx)
    }
}

impl<T: Real> Parameterized<T> for ConvTranspose2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
