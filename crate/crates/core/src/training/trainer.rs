use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointKind};
use super::optim::{OptimHyper, Optimizer, OptimizerKind};
use super::schedule::{cosine_lr, default_warmup, scaled_peak_lr};
use crate::autograd::Tape;
use crate::data::{augment, ImageRecord};
use crate::error::{invalid, Error, Result};
use crate::masking::PatchMask;
use crate::model::SparkModel;
use crate::rng::stream;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const MASK_STREAM: u64 = 3;

/// How the peak learning rate is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum LrRule {
    /// `base * batch_size / 256`.
    Scaled { base: f64 },
    /// A fixed peak, independent of the batch size.
    Peak { value: f64 },
}

impl Default for LrRule {
    fn default() -> Self {
        LrRule::Scaled { base: 2e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub lr: LrRule,
    /// Defaults to [`default_warmup`] of the total step count.
    pub warmup_steps: Option<usize>,
    pub optimizer: OptimizerKind,
    pub hyper: OptimHyper,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            max_steps: None,
            lr: LrRule::default(),
            warmup_steps: None,
            optimizer: OptimizerKind::default(),
            hyper: OptimHyper::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be positive"));
        }
        let lr = self.peak_lr();
        if !lr.is_finite() || lr <= 0.0 {
            return Err(invalid(format!("peak learning rate must be positive, got {lr}")));
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        match self.lr {
            LrRule::Scaled { base } => scaled_peak_lr(base, self.batch_size),
            LrRule::Peak { value } => value,
        }
    }

    /// Full batches per epoch; the remainder of a shuffled epoch is dropped.
    pub fn steps_per_epoch(&self, dataset_len: usize) -> Result<usize> {
        let n = dataset_len / self.batch_size;
        if n == 0 {
            return Err(invalid(format!(
                "{} images cannot fill a batch of {}",
                dataset_len, self.batch_size
            )));
        }
        Ok(n)
    }

    pub fn total_steps(&self, dataset_len: usize) -> Result<usize> {
        let all = self.epochs * self.steps_per_epoch(dataset_len)?;
        Ok(self.max_steps.map_or(all, |m| m.min(all)))
    }

    pub fn warmup(&self, total: usize) -> usize {
        self.warmup_steps.unwrap_or_else(|| default_warmup(total)).min(total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based optimizer step.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// `step,lr,loss` rows.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "step,lr,loss")?;
        Ok(MetricsWriter { out })
    }

    /// Continues an existing file without repeating the header.
    pub fn append(out: W) -> Self {
        MetricsWriter { out }
    }

    pub fn write(&mut self, log: &StepLog) -> Result<()> {
        writeln!(self.out, "{},{:e},{:e}", log.step, log.lr, log.loss)?;
        self.out.flush()?;
        Ok(())
    }
}

/// Optimizer, step counter and mask stream of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub optimizer: Optimizer,
    /// Completed steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: &SparkModel) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            optimizer: Optimizer::new(cfg.optimizer, cfg.hyper, model.store()),
            rng: stream(cfg.seed, &[MASK_STREAM]),
            step: 0,
            cfg,
        })
    }

    /// Batch of step `step` (0-based): augmented images and their dataset indices.
    pub fn batch(&self, data: &[ImageRecord], step: usize, size: usize) -> Result<(Tensor, Vec<usize>)> {
        let spe = self.cfg.steps_per_epoch(data.len())?;
        let (epoch, k) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(self.cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let b = self.cfg.batch_size;
        let picks = order[k * b..(k + 1) * b].to_vec();
        let crops = picks
            .iter()
            .map(|&i| {
                let mut rng = stream(self.cfg.seed, &[AUGMENT_STREAM, epoch as u64, i as u64]);
                augment(&data[i].pixels, size, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((Tensor::stack(&crops)?, picks))
    }

    /// One forward/backward/update on a prepared batch at learning rate `lr`.
    pub fn train_step(&mut self, model: &mut SparkModel, images: &Tensor, masks: &[PatchMask], lr: f64) -> Result<f64> {
        let tape = Tape::new();
        let mut session = model.session(&tape, true);
        let out = session.forward(images, masks)?;
        let bindings = session.finish();
        let loss = out.loss.item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step as usize + 1,
                value: loss,
            });
        }
        out.loss.backward()?;
        let grads = bindings.grads();
        self.optimizer.apply(model.store_mut(), &grads, lr)?;
        self.step += 1;
        Ok(loss)
    }

    /// Trains until the configured step count, calling `on_step` after each step.
    pub fn run(
        &mut self,
        model: &mut SparkModel,
        data: &[ImageRecord],
        mut on_step: impl FnMut(&StepLog, &Trainer, &SparkModel) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        let size = model.config().image_size;
        crate::data::validate_images(data, size)?;
        let total = self.cfg.total_steps(data.len())?;
        let spe = self.cfg.steps_per_epoch(data.len())?;
        let warmup = self.cfg.warmup(total);
        let peak = self.cfg.peak_lr();
        let mut logs = Vec::new();
        while (self.step as usize) < total {
            let s = self.step as usize;
            let (images, _) = self.batch(data, s, size)?;
            let masks = model.sample_masks(self.cfg.batch_size, &mut self.rng)?;
            let lr = cosine_lr(s, total, peak, warmup);
            let loss = self.train_step(model, &images, &masks, lr)?;
            let log = StepLog {
                step: s + 1,
                epoch: s / spe,
                lr,
                loss,
            };
            on_step(&log, self, model)?;
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn checkpoint(&self, model: &SparkModel) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Model,
            model: model.config().clone(),
            train: Some(self.cfg.clone()),
            step: self.step,
            rng: Some(self.rng.clone()),
            params: model.store().clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// Model and trainer state saved by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint) -> Result<(SparkModel, Trainer)> {
        let model = restore_model(ckpt)?;
        let cfg = ckpt
            .train
            .clone()
            .ok_or_else(|| invalid("checkpoint has no training configuration"))?;
        let mut trainer = Trainer::new(cfg, &model)?;
        trainer.step = ckpt.step;
        if let Some(rng) = &ckpt.rng {
            trainer.rng = rng.clone();
        }
        if let Some(opt) = &ckpt.optimizer {
            trainer.optimizer = opt.clone();
        }
        Ok((model, trainer))
    }
}

/// Rebuilds a model from a full checkpoint.
pub fn restore_model(ckpt: &Checkpoint) -> Result<SparkModel> {
    if ckpt.kind != CheckpointKind::Model {
        return Err(invalid("checkpoint holds an encoder export, not a full model"));
    }
    // Every value is overwritten from the checkpoint.
    let mut model = SparkModel::new(ckpt.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected: Vec<&str> = model.store().iter().map(|(_, p)| p.name.as_str()).collect();
    let found: Vec<&str> = ckpt.params.iter().map(|(_, p)| p.name.as_str()).collect();
    if expected != found {
        return Err(invalid(format!(
            "checkpoint parameters do not match the configured model ({} stored, {} expected)",
            found.len(),
            expected.len()
        )));
    }
    model.store_mut().copy_matching_from(&ckpt.params)?;
    Ok(model)
}

/// Masked-mode loss of a frozen model in evaluation mode.
pub fn evaluate_loss(model: &SparkModel, images: &Tensor, masks: &[PatchMask]) -> Result<f64> {
    let mut m = model.clone();
    let tape = Tape::new();
    let mut s = m.session(&tape, false);
    Ok(s.forward(images, masks)?.loss.item())
}
