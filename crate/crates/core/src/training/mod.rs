//! Losses, optimizer, per-sample gradients, checkpoints and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod step;
pub mod trainer;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use config::{Stage, TrainConfig};
pub use loss::{loss_e, loss_w, LossBreakdown};
pub use step::{mf_loss_and_grads, sf_loss_and_grads, SampleTensors};
pub use trainer::{curriculum, epoch_path, latest_path, SampleSource, StepRecord, Trainer};
