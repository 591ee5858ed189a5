//! Epoch loop, optimizer stepping, checkpointing and resumption.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::adam::Adam;
use super::checkpoint::{Checkpoint, RngState};
use super::config::{Stage, TrainConfig};
use super::loss::LossBreakdown;
use super::step::{mf_loss_and_grads, sf_loss_and_grads, SampleTensors};
use crate::dataset::{DatasetIndex, TrainingSample};
use crate::error::{QenetError, Result};
use crate::frame::Clip;
use crate::nn::Parameterized;
use crate::pipeline::Models;

/// Anything that can hand out training samples by position.
pub trait SampleSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample `i`, cropped to `crop` (0 keeps whole frames) using `rng`.
    fn draw(&self, i: usize, rng: &mut ChaCha8Rng, crop: usize) -> Result<TrainingSample>;
}

impl SampleSource for DatasetIndex {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn draw(&self, i: usize, rng: &mut ChaCha8Rng, crop: usize) -> Result<TrainingSample> {
        let id = &self.entries[i].id;
        match crop {
            0 => TrainingSample::full(&self.load_clip(id)?),
            c => self.sample(id, rng, c),
        }
    }
}

impl SampleSource for [Clip] {
    fn len(&self) -> usize {
        <[Clip]>::len(self)
    }

    fn draw(&self, i: usize, rng: &mut ChaCha8Rng, crop: usize) -> Result<TrainingSample> {
        match crop {
            0 => TrainingSample::full(&self[i]),
            c => TrainingSample::crop_from(&self[i], rng, c),
        }
    }
}

/// One optimizer step, as logged.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub qp: u8,
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub clips: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub models: Models<f32>,
    pub adam: Adam<f32>,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let models = Models::new(config.model(), &mut rng)?;
        Ok(Self::with_models(config, models, rng))
    }

    /// Starts a fresh stage from the given weights.
    pub fn with_models(config: TrainConfig, models: Models<f32>, rng: ChaCha8Rng) -> Self {
        let adam = Adam::new(config.adam(), &models);
        Trainer { config, models, adam, epoch: 0, step: 0, rng }
    }

    /// Resumes when the checkpoint belongs to the same stage and QP; otherwise
    /// its weights initialize a new stage (e.g. QP 32 → 37 fine-tuning).
    pub fn from_checkpoint(config: TrainConfig, ck: Checkpoint) -> Result<Self> {
        config.validate()?;
        if ck.models.config != config.model() {
            return Err(QenetError::Checkpoint(format!(
                "checkpoint model {:?} does not match configured {:?}",
                ck.models.config,
                config.model()
            )));
        }
        if ck.stage == config.stage && ck.qp == config.qp {
            let rng = ck.rng.restore()?;
            Ok(Trainer { config, models: ck.models, adam: ck.adam, epoch: ck.epoch, step: ck.step, rng })
        } else {
            let rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut models = ck.models;
            if config.mf_from_sf && ck.stage == Stage::Sf && config.stage == Stage::Mf {
                models.warm_start_mf();
            }
            Ok(Self::with_models(config, models, rng))
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.epoch)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            stage: self.config.stage,
            qp: self.config.qp,
            epoch: self.epoch,
            step: self.step,
            rng: RngState::capture(&self.rng),
            models: self.models.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Accumulates gradients over `samples` (averaged) and applies one Adam update.
    pub fn train_step(&mut self, samples: &[TrainingSample]) -> Result<LossBreakdown> {
        if samples.is_empty() {
            return Err(QenetError::InvalidArgument("train step without samples".into()));
        }
        let mut grads = self.models.zeroed();
        let (mut l_e, mut l_w) = (0.0, 0.0);
        let mut per_frame = Vec::new();
        let mut tapes = Vec::new();
        for s in samples {
            let tensors = SampleTensors::from_sample(s);
            let out = match self.config.stage {
                Stage::Sf => sf_loss_and_grads(&self.models, &tensors, &mut grads)?,
                Stage::Mf => mf_loss_and_grads(&self.models, &tensors, &mut grads, [true; 3])?,
            };
            l_e += out.loss.l_e;
            l_w += out.loss.l_w;
            per_frame.extend(out.per_frame);
            tapes.extend(out.flow_tapes);
        }
        let k = samples.len() as f64;
        let loss = LossBreakdown::new(l_e / k, l_w / k);
        if !loss.is_finite() || !grads.all_finite() {
            return Err(QenetError::NonFiniteLoss { step: self.step, per_frame });
        }
        if samples.len() > 1 {
            grads.visit_mut("", &mut |_, p| p.data.iter_mut().for_each(|v| *v /= samples.len() as f32));
        }
        for tape in &tapes {
            self.models.flow.commit_stats(tape);
        }
        let (stage, lr) = (self.config.stage, self.lr());
        self.adam.step(&mut self.models, &grads, lr, |name| stage.trains(name))?;
        self.step += 1;
        Ok(loss)
    }

    /// One pass over `source` in a shuffled order (capped by `steps_per_epoch`).
    pub fn run_epoch(&mut self, source: &(impl SampleSource + ?Sized), on_step: &mut dyn FnMut(&StepRecord)) -> Result<Vec<LossBreakdown>> {
        if source.is_empty() {
            return Err(QenetError::Dataset("no training samples".into()));
        }
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut self.rng);
        let per_step = self.config.sequences_per_step;
        let mut groups: Vec<&[usize]> = order.chunks(per_step).collect();
        if self.config.steps_per_epoch > 0 {
            groups.truncate(self.config.steps_per_epoch as usize);
        }
        let mut losses = Vec::with_capacity(groups.len());
        let crop = self.config.crop;
        for group in groups {
            let samples = group.iter().map(|&i| source.draw(i, &mut self.rng, crop)).collect::<Result<Vec<_>>>()?;
            let lr = self.lr();
            let loss = self.train_step(&samples)?;
            on_step(&StepRecord {
                stage: self.config.stage,
                qp: self.config.qp,
                epoch: self.epoch,
                step: self.step,
                lr,
                loss,
                clips: samples.into_iter().map(|s| s.clip_id).collect(),
            });
            losses.push(loss);
        }
        self.epoch += 1;
        Ok(losses)
    }

    /// Runs the remaining epochs, writing a checkpoint after each one.
    /// A failing epoch leaves the previous checkpoint in place.
    pub fn fit(
        &mut self,
        source: &(impl SampleSource + ?Sized),
        checkpoint_dir: &Path,
        on_step: &mut dyn FnMut(&StepRecord),
    ) -> Result<PathBuf> {
        let mut last = latest_path(checkpoint_dir, self.config.stage, self.config.qp);
        while self.epoch < self.config.epochs {
            self.run_epoch(source, on_step)?;
            let ck = self.checkpoint();
            ck.save(&epoch_path(checkpoint_dir, self.config.stage, self.config.qp, self.epoch))?;
            last = latest_path(checkpoint_dir, self.config.stage, self.config.qp);
            ck.save(&last)?;
        }
        Ok(last)
    }
}

pub fn epoch_path(dir: &Path, stage: Stage, qp: u8, epoch: u64) -> PathBuf {
    dir.join(format!("{stage}-qp{qp}-epoch{epoch:04}.qck"))
}

pub fn latest_path(dir: &Path, stage: Stage, qp: u8) -> PathBuf {
    dir.join(format!("{stage}-qp{qp}-latest.qck"))
}

/// The full recipe: single-frame pre-training at QP 32, multi-frame training
/// at QP 32 from those weights, then multi-frame fine-tuning at QP 37.
/// `source_for` supplies the training set for a QP.
pub fn curriculum<S: SampleSource + ?Sized>(
    base: &TrainConfig,
    source_for: &dyn Fn(u8) -> Result<Box<S>>,
    checkpoint_dir: &Path,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Models<f32>> {
    let mut previous: Option<Checkpoint> = None;
    for (stage, qp) in [(Stage::Sf, 32), (Stage::Mf, 32), (Stage::Mf, 37)] {
        let config = TrainConfig { stage, qp, ..base.clone() };
        let source = source_for(qp)?;
        let mut trainer = match previous.take() {
            Some(ck) => Trainer::from_checkpoint(config, ck)?,
            None => Trainer::new(config)?,
        };
        let path = trainer.fit(&*source, checkpoint_dir, on_step)?;
        previous = Some(Checkpoint::load(&path)?);
    }
    Ok(previous.expect("three stages ran").models)
}
