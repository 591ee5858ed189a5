//! Frame-recurrent quality enhancement for compressed video.
//!
//! A multi-scale single-frame enhancer handles intra frames; each following
//! frame is enhanced from its decoded pixels concatenated with the previous
//! enhanced frame warped by an estimated optical flow.

pub mod codec;
pub mod dataset;
pub mod enhancer;
pub mod error;
pub mod exec;
pub mod flownet;
pub mod frame;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod real;
pub mod tensor;
pub mod training;
pub mod warp;

pub use error::{QenetError, Result};
pub use frame::{Clip, Flow, Frame, FrameKind, Variant};
pub use real::Real;
pub use tensor::Tensor;
