//! Sub-pixel rearrangement between channels and space.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// `(C·r², H, W) -> (C, rH, rW)` with `out[c][y·r+i][x·r+j] = in[c·r²+i·r+j][y][x]`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let r2 = r * r;
    if r == 0 || !x.c.is_multiple_of(r2) {
        return Err(shape_err!("pixel shuffle: {} channels not divisible by {r}^2", x.c));
    }
    let c = x.c / r2;
    Ok(Tensor::from_fn(c, x.h * r, x.w * r, |o, y, xx| x.at(o * r2 + (y % r) * r + xx % r, y / r, xx / r)))
}

/// Inverse of [`pixel_shuffle`]; also its gradient.
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if r == 0 || !x.h.is_multiple_of(r) || !x.w.is_multiple_of(r) {
        return Err(shape_err!("pixel unshuffle: {}x{} not divisible by {r}", x.h, x.w));
    }
    let r2 = r * r;
    Ok(Tensor::from_fn(x.c * r2, x.h / r, x.w / r, |ci, y, xx| {
        let (o, sub) = (ci / r2, ci % r2);
        x.at(o, y * r + sub / r, xx * r + sub % r)
    }))
}
