use crate::real::Real;
use crate::tensor::Tensor;

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of ReLU given its input (or output; the mask is identical).
pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (g, &v) in dx.data.iter_mut().zip(&x.data) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}
