//! Neural network primitives with hand-written backward passes.
//!
//! Every layer exposes `forward` plus a `backward` that takes the saved
//! forward input (or cache), the output gradient, and a gradient
//! accumulator of the layer's own type.

pub mod act;
pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod param;
pub mod resblock;
pub mod shuffle;

pub use act::{relu, relu_backward};
pub use conv::{Conv2d, ConvTranspose2d, LayerKind, LayerSpec};
pub use norm::{BatchNorm2d, BnCache, NormMode};
pub use param::{Param, Parameterized};
pub use resblock::{ResBlock, ResBlockCache};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};
