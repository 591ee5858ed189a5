//! Dense channel-major (C×H×W) tensors.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self::full(c, h, w, T::zero())
    }

    pub fn full(c: usize, h: usize, w: usize, v: T) -> Self {
        Tensor { c, h, w, data: vec![v; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(shape_err!("{} elements for {c}x{h}x{w}", data.len()));
        }
        Ok(Tensor { c, h, w, data })
    }

    pub fn from_fn(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Tensor { c, h, w, data }
    }

    pub fn randn(c: usize, h: usize, w: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(c, h, w, |_, _, _| T::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
    }

    pub fn uniform(c: usize, h: usize, w: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(c, h, w, |_, _, _| T::from_f64(rng.random_range(lo..hi)))
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.c, self.h, self.w)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape_err!("{what}: {:?} vs {:?}", self.shape(), other.shape()))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks tensors along the channel axis.
    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let (h, w) = (first.h, first.w);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut c = 0;
        for p in parts {
            if p.h != h || p.w != w {
                return Err(shape_err!("concat spatial {}x{} vs {}x{}", p.h, p.w, h, w));
            }
            data.extend_from_slice(&p.data);
            c += p.c;
        }
        Ok(Tensor { c, h, w, data })
    }

    /// Splits into consecutive channel groups of the given sizes; the inverse of [`Tensor::concat`].
    pub fn split(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        if sizes.iter().sum::<usize>() != self.c {
            return Err(shape_err!("split {:?} of {} channels", sizes, self.c));
        }
        let n = self.plane_len();
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            out.push(Tensor { c: s, h: self.h, w: self.w, data: self.data[start * n..(start + s) * n].to_vec() });
            start += s;
        }
        Ok(out)
    }

    /// Channels `[from, from + count)`.
    pub fn channels(&self, from: usize, count: usize) -> Self {
        let n = self.plane_len();
        Tensor { c: count, h: self.h, w: self.w, data: self.data[from * n..(from + count) * n].to_vec() }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.h || left + w > self.w {
            return Err(shape_err!("crop {h}x{w}@({top},{left}) out of {}x{}", self.h, self.w));
        }
        Ok(Self::from_fn(self.c, h, w, |c, y, x| self.at(c, top + y, left + x)))
    }

    /// Edge-replicating pad to `h`×`w` (content stays at the top-left).
    pub fn pad_replicate(&self, h: usize, w: usize) -> Self {
        debug_assert!(h >= self.h && w >= self.w);
        Self::from_fn(self.c, h, w, |c, y, x| self.at(c, y.min(self.h - 1), x.min(self.w - 1)))
    }

    /// Adjoint of [`Tensor::pad_replicate`]: folds gradients of the padded area back onto the edge.
    pub fn pad_replicate_backward(grad: &Self, h: usize, w: usize) -> Self {
        let mut out = Self::zeros(grad.c, h, w);
        for c in 0..grad.c {
            for y in 0..grad.h {
                for x in 0..grad.w {
                    let i = out.idx(c, y.min(h - 1), x.min(w - 1));
                    out.data[i] += grad.at(c, y, x);
                }
            }
        }
        out
    }

    /// Edge-replicating pad by `p` on every side.
    pub fn pad_edges(&self, p: usize) -> Self {
        let (h, w) = (self.h as isize, self.w as isize);
        Self::from_fn(self.c, self.h + 2 * p, self.w + 2 * p, |c, y, x| {
            let sy = (y as isize - p as isize).clamp(0, h - 1) as usize;
            let sx = (x as isize - p as isize).clamp(0, w - 1) as usize;
            self.at(c, sy, sx)
        })
    }

    /// Adjoint of [`Tensor::pad_edges`].
    pub fn pad_edges_backward(grad: &Self, p: usize) -> Self {
        let (h, w) = (grad.h - 2 * p, grad.w - 2 * p);
        let mut out = Self::zeros(grad.c, h, w);
        for c in 0..grad.c {
            for y in 0..grad.h {
                let sy = y.saturating_sub(p).min(h - 1);
                for x in 0..grad.w {
                    let sx = x.saturating_sub(p).min(w - 1);
                    let i = out.idx(c, sy, sx);
                    out.data[i] += grad.at(c, y, x);
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor::crop`]: places `self` at `(top, left)` in a zero `h`×`w` canvas.
    pub fn embed(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut out = Self::zeros(self.c, h, w);
        for c in 0..self.c {
            for y in 0..self.h {
                let dst = out.idx(c, top + y, left);
                let src = self.idx(c, y, 0);
                out.data[dst..dst + self.w].copy_from_slice(&self.data[src..src + self.w]);
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
    }
}
