//! Minibatch training on the compound loss.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{forward_graph, Mode, ModelParams};
use super::optim::{LrSchedule, OptimizerState, StepOutcome};
use super::tensor::Tensor;
use crate::data::{item_rng, SceneSample};
use crate::error::{Error, Result};
use crate::losses::{compound_loss, BatchTargets, LossBreakdown};

pub const DEFAULT_BETA: f64 = 0.03;
const STREAM_SHUFFLE: u64 = 0x7E_01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub beta: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Cosine decay from `lr_start` to `lr_end`; otherwise `lr_start` throughout.
    pub cosine: bool,
    pub norm_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            beta: DEFAULT_BETA,
            lr_start: 3e-3,
            lr_end: 1e-5,
            cosine: true,
            norm_momentum: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be finite and ≥ 0, got {}", self.beta)));
        }
        if !(self.lr_start > 0.0 && self.lr_end >= 0.0 && self.lr_start.is_finite()) {
            return Err(Error::Config(format!(
                "invalid learning rates {} → {}",
                self.lr_start, self.lr_end
            )));
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::Config(format!(
                "norm_momentum {} not in [0, 1]",
                self.norm_momentum
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> u64 {
        samples.div_ceil(self.batch_size) as u64
    }

    pub fn schedule(&self, samples: usize) -> LrSchedule {
        if self.cosine {
            LrSchedule::Cosine {
                lr_start: self.lr_start,
                lr_end: self.lr_end,
                total_steps: self.epochs * self.steps_per_epoch(samples),
            }
        } else {
            LrSchedule::Constant { lr: self.lr_start }
        }
    }
}

/// Training samples for one epoch, indexed `0..len()`. Sources must be pure in `(epoch, index)`.
pub trait SampleSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample(&self, epoch: u64, index: usize) -> Result<SceneSample>;
}

impl SampleSource for [SceneSample] {
    fn len(&self) -> usize {
        <[SceneSample]>::len(self)
    }

    fn sample(&self, _epoch: u64, index: usize) -> Result<SceneSample> {
        Ok(self[index].clone())
    }
}

/// Optimizer state plus the number of completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainProgress {
    pub optimizer: OptimizerState,
    pub epochs_done: u64,
}

impl TrainProgress {
    pub fn new(params: &ModelParams, cfg: &TrainConfig, samples: usize) -> Self {
        TrainProgress {
            optimizer: OptimizerState::new(params, cfg.schedule(samples)),
            epochs_done: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    /// Loss terms averaged over the epoch's batches; pixel counts are summed.
    pub loss: LossBreakdown,
    pub steps: u64,
    pub skipped: u64,
    pub lr: f64,
}

/// Stacks `[C, H, W]` samples into a batch tensor and its loss targets.
pub fn assemble_batch(samples: &[SceneSample]) -> Result<(Tensor, BatchTargets)> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.to_tensor()).collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let x = Tensor::stack(&refs)?;
    let labels: Vec<_> = samples.iter().map(|s| &s.labels).collect();
    let masks: Vec<_> = samples.iter().map(|s| &s.mask).collect();
    Ok((x, BatchTargets::new(&labels, &masks)?))
}

/// One forward/backward pass and optimizer update.
pub fn train_step(
    params: &mut ModelParams,
    optimizer: &mut OptimizerState,
    batch: &[SceneSample],
    beta: f64,
    norm_momentum: f64,
) -> Result<(LossBreakdown, StepOutcome)> {
    let (x, targets) = assemble_batch(batch)?;
    let mut pass = forward_graph(params, &x, Mode::Train)?;
    let loss = compound_loss(&mut pass.graph, pass.logits, pass.head_logit, &targets, beta)?;
    let breakdown = loss.breakdown(&pass.graph, &targets);
    let grads = pass.graph.backward(loss.total)?;
    let grads: Vec<Tensor> = pass
        .params
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    let outcome = optimizer.step(params, &grads)?;
    if outcome == StepOutcome::Applied {
        params.update_running_stats(&pass.moments, norm_momentum);
    }
    Ok((breakdown, outcome))
}

/// Runs the remaining epochs `progress.epochs_done..cfg.epochs`.
///
/// `params` and `progress` only ever hold the state after a successful step, so on
/// divergence they are the last good state and the error is returned.
pub fn train(
    params: &mut ModelParams,
    progress: &mut TrainProgress,
    source: &(impl SampleSource + ?Sized),
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &ModelParams, &TrainProgress) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut logs = Vec::new();
    for epoch in progress.epochs_done..cfg.epochs {
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut item_rng(cfg.seed, STREAM_SHUFFLE, epoch));
        let lr = progress.optimizer.current_lr();
        let skipped_before = progress.optimizer.skipped;
        let mut sum = LossBreakdown::default();
        let mut batches = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| source.sample(epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let (b, _) = train_step(params, &mut progress.optimizer, &batch, cfg.beta, cfg.norm_momentum).map_err(
                |e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!(
                        "training diverged in epoch {epoch} at step {}: {what}",
                        progress.optimizer.step
                    )),
                    other => other,
                },
            )?;
            sum.accumulate(&b);
            batches += 1;
        }
        progress.epochs_done = epoch + 1;
        let log = EpochLog {
            epoch,
            loss: sum.mean_over(batches),
            steps: batches,
            skipped: progress.optimizer.skipped - skipped_before,
            lr,
        };
        log::info!(
            "epoch {epoch}: total {:.5} cls {:.5} post_in {:.5} post_out {:.5} lik_out {:.5}",
            log.loss.total,
            log.loss.cls,
            log.loss.posterior_in,
            log.loss.posterior_out,
            log.loss.likelihood_out
        );
        on_epoch(&log, params, progress)?;
        logs.push(log);
    }
    Ok(logs)
}
