use crate::real::Real;

/// A named block of weights. Non-trainable params (normalization running
/// statistics) are checkpointed but never touched by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Param { shape, data, trainable: true }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param::new(shape, vec![T::zero(); n])
    }

    pub fn buffer(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Param { shape, data: vec![value; n], trainable: false }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Structural traversal over every [`Param`] a module owns, in a fixed order.
///
/// Gradient accumulators are values of the same type as the module they
/// belong to, so optimizers walk `(params, grads)` pairs by zipping two
/// traversals.
pub trait Parameterized<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>));

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n, p)));
        out
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }

    /// Euclidean norm over trainable entries.
    fn trainable_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                s += p.data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
        });
        s.sqrt()
    }

    fn fill_zero(&mut self) {
        self.visit_mut("", &mut |_, p| p.data.iter_mut().for_each(|v| *v = T::zero()));
    }

    /// Copy of `self` with every parameter zeroed, for use as a gradient accumulator.
    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut g = self.clone();
        g.fill_zero();
        g
    }

    /// Adds `alpha * other` into every trainable parameter.
    fn axpy(&mut self, alpha: T, other: &Self)
    where
        Self: Sized,
    {
        let src: Vec<&[T]> = other.named_params().into_iter().map(|(_, p)| p.data.as_slice()).collect();
        let mut i = 0;
        self.visit_mut("", &mut |_, p| {
            if p.trainable {
                for (d, &s) in p.data.iter_mut().zip(src[i]) {
                    *d += alpha * s;
                }
            }
            i += 1;
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, p| ok &= p.data.iter().all(|v| v.is_finite()));
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real, M: Parameterized<T>> Parameterized<T> for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
