//! Backward bilinear warping with border-clamped sampling.
//!
//! `out(y, x) = bilinear(input, y − fy(y, x), x − fx(y, x))`, where the
//! sampling coordinate is clamped to the image rectangle first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::exec;
use crate::frame::{Flow, Frame, Variant};
use crate::nn::gradcheck::{check_tensor, GradCheckReport};
use crate::real::Real;
use crate::tensor::Tensor;

/// Bilinear footprint of one sampling point.
#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: T,
    ay: T,
    /// Whether the raw coordinate was inside the rectangle (derivative w.r.t. flow is live).
    live_x: bool,
    live_y: bool,
}

#[inline]
fn axis<T: Real>(raw: T, n: usize) -> (usize, usize, T, bool) {
    let hi = T::from_f64((n - 1) as f64);
    let live = raw >= T::zero() && raw <= hi;
    let s = raw.max(T::zero()).min(hi);
    let i0 = s.floor().to_usize().unwrap_or(0).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - T::from_f64(i0 as f64), live)
}

#[inline]
fn tap<T: Real>(flow: &Tensor<T>, y: usize, x: usize) -> Tap<T> {
    let fx = flow.at(0, y, x);
    let fy = flow.at(1, y, x);
    let (x0, x1, ax, live_x) = axis(T::from_f64(x as f64) - fx, flow.w);
    let (y0, y1, ay, live_y) = axis(T::from_f64(y as f64) - fy, flow.h);
    Tap { x0, x1, y0, y1, ax, ay, live_x, live_y }
}

fn check<T: Real>(frame: &Tensor<T>, flow: &Tensor<T>) -> Result<()> {
    if flow.c != 2 || (flow.h, flow.w) != (frame.h, frame.w) {
        return Err(shape_err!("warp: frame {:?} with flow {:?}", frame.shape(), flow.shape()));
    }
    if frame.h == 0 || frame.w == 0 {
        return Err(shape_err!("warp: empty frame"));
    }
    Ok(())
}

pub fn warp_tensor<T: Real>(frame: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    check(frame, flow)?;
    let (h, w) = (frame.h, frame.w);
    let mut out = frame.zeros_like();
    exec::for_each_chunk_mut(&mut out.data, w, |row, dst| {
        let (c, y) = (row / h, row % h);
        let src = frame.plane(c);
        for (x, o) in dst.iter_mut().enumerate() {
            let t = tap(flow, y, x);
            let one = T::one();
            *o = (one - t.ay) * ((one - t.ax) * src[t.y0 * w + t.x0] + t.ax * src[t.y0 * w + t.x1])
                + t.ay * ((one - t.ax) * src[t.y1 * w + t.x0] + t.ax * src[t.y1 * w + t.x1]);
        }
    });
    Ok(out)
}

/// Returns `(d frame, d flow)` for output gradient `dy`.
pub fn warp_tensor_backward<T: Real>(frame: &Tensor<T>, flow: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    check(frame, flow)?;
    frame.ensure_same_shape(dy, "warp backward")?;
    let (h, w) = (frame.h, frame.w);
    let one = T::one();

    let mut dframe = frame.zeros_like();
    exec::for_each_chunk_mut(&mut dframe.data, h * w, |c, dst| {
        let g = dy.plane(c);
        for y in 0..h {
            for x in 0..w {
                let t = tap(flow, y, x);
                let gv = g[y * w + x];
                dst[t.y0 * w + t.x0] += gv * (one - t.ay) * (one - t.ax);
                dst[t.y0 * w + t.x1] += gv * (one - t.ay) * t.ax;
                dst[t.y1 * w + t.x0] += gv * t.ay * (one - t.ax);
                dst[t.y1 * w + t.x1] += gv * t.ay * t.ax;
            }
        }
    });

    // Interleaved (dfx, dfy) per pixel, split into planes afterwards.
    let mut pairs = vec![T::zero(); 2 * h * w];
    exec::for_each_chunk_mut(&mut pairs, 2 * w, |y, dst| {
        for x in 0..w {
            let t = tap(flow, y, x);
            let (mut gx, mut gy) = (T::zero(), T::zero());
            for c in 0..frame.c {
                let src = frame.plane(c);
                let gv = dy.at(c, y, x);
                let (i00, i01) = (src[t.y0 * w + t.x0], src[t.y0 * w + t.x1]);
                let (i10, i11) = (src[t.y1 * w + t.x0], src[t.y1 * w + t.x1]);
                let ds_x = (one - t.ay) * (i01 - i00) + t.ay * (i11 - i10);
                let ds_y = (one - t.ax) * (i10 - i00) + t.ax * (i11 - i01);
                gx += gv * ds_x;
                gy += gv * ds_y;
            }
            // Sampling coordinate is position minus flow.
            dst[2 * x] = if t.live_x { -gx } else { T::zero() };
            dst[2 * x + 1] = if t.live_y { -gy } else { T::zero() };
        }
    });
    let mut dflow = flow.zeros_like();
    for i in 0..h * w {
        dflow.data[i] = pairs[2 * i];
        dflow.data[h * w + i] = pairs[2 * i + 1];
    }
    Ok((dframe, dflow))
}

/// Warps `frame` by `flow`, producing the predicted frame for `flow.dst_index`.
pub fn warp(frame: &Frame, flow: &Flow) -> Result<Frame> {
    let pixels = warp_tensor(&frame.pixels, &flow.vectors)?;
    Ok(Frame {
        pixels,
        index: flow.dst_index,
        kind: crate::frame::FrameKind::for_index(flow.dst_index),
        variant: Variant::Predicted,
        crop: frame.crop,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct WarpGradReport {
    pub seed: u64,
    pub frame: GradCheckReport,
    pub flow: GradCheckReport,
    pub passed: bool,
}

/// Finite-difference check of the warp gradients on a random 8×8 instance
/// whose sampling points are interior and away from integer coordinates.
pub fn warp_gradient_check(seed: u64) -> WarpGradReport {
    const TOL: f64 = 1e-3;
    const STEP: f64 = 1e-3;
    let (c, h, w) = (3, 8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = Tensor::<f64>::uniform(c, h, w, 0.0, 1.0, &mut rng);
    let mut flow = Tensor::<f64>::zeros(2, h, w);
    let interior = |rng: &mut ChaCha8Rng, n: usize| -> f64 {
        let base = rng.random_range(0..n - 1) as f64;
        (base + rng.random_range(0.2..0.8)).clamp(0.2, n as f64 - 1.2)
    };
    for y in 0..h {
        for x in 0..w {
            let sx = interior(&mut rng, w);
            let sy = interior(&mut rng, h);
            flow.set(0, y, x, x as f64 - sx);
            flow.set(1, y, x, y as f64 - sy);
        }
    }
    let weights = Tensor::<f64>::uniform(c, h, w, 0.5, 1.5, &mut rng);
    let objective = |fr: &Tensor<f64>, fl: &Tensor<f64>| -> f64 {
        let out = warp_tensor(fr, fl).expect("shapes fixed");
        out.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
    };
    let (dframe, dflow) = warp_tensor_backward(&frame, &flow, &weights).expect("shapes fixed");
    let fr = check_tensor("warp.frame", &frame, &dframe, usize::MAX, STEP, TOL, |t| objective(t, &flow));
    let fl = check_tensor("warp.flow", &flow, &dflow, usize::MAX, STEP, TOL, |t| objective(&frame, t));
    let passed = fr.passed && fl.passed;
    WarpGradReport { seed, frame: fr, flow: fl, passed }
}
