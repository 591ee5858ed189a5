use rand::Rng;

use super::act::{relu, relu_backward};
use super::conv::{Conv2d, LayerSpec};
use super::param::{join, Param, Parameterized};
use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// `x + conv(relu(conv(x)))` with 3×3 kernels and no normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache<T> {
    x: Tensor<T>,
    hidden: Tensor<T>,
}

impl<T: Real> ResBlock<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv2d::new(LayerSpec::conv(channels, channels, 3, 1), rng)?,
            conv2: Conv2d::new(LayerSpec::conv(channels, channels, 3, 1), rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.conv1.in_channels
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.c != self.channels() {
            return Err(shape_err!("resblock over {} channels got {}", self.channels(), x.c));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ResBlockCache<T>)> {
        self.check(x)?;
        let hidden = relu(&self.conv1.forward(x)?);
        let mut y = self.conv2.forward(&hidden)?;
        y.add_assign(x);
        Ok((y, ResBlockCache { x: x.clone(), hidden }))
    }

    pub fn backward(&self, cache: &ResBlockCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let dh = self.conv2.backward(&cache.hidden, dy, &mut grad.conv2)?;
        let dh = relu_backward(&cache.hidden, &dh);
        let mut dx = self.conv1.backward(&cache.x, &dh, &mut grad.conv1)?;
        dx.add_assign(dy);
        Ok(dx)
    }
}

impl<T: Real> Parameterized<T> for ResBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_residual_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rb = ResBlock::<f32>::new(8, &mut rng).unwrap();
        rb.fill_zero();
        let x = Tensor::randn(8, 9, 7, 1.0, &mut rng);
        assert_eq!(rb.forward(&x).unwrap(), x);
    }

    #[test]
    fn shape_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rb = ResBlock::<f32>::new(4, &mut rng).unwrap();
        let x = Tensor::randn(4, 5, 13, 1.0, &mut rng);
        assert_eq!(rb.forward(&x).unwrap().shape(), x.shape());
        assert!(rb.forward(&Tensor::zeros(3, 5, 5)).is_err());
    }
}
