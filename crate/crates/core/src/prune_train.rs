//! Training under random block skipping.
//!
//! Blocks in the keep-set always run; each other block is skipped with
//! probability `p`, independently per iteration. One parameter set is
//! trained on
//!
//! ```text
//! L_training = (1−α)·[fm(pruned) + fm(unpruned)]
//! L_distill  = α·mean‖v_pruned − SG(v_unpruned)‖²
//! ```
//!
//! Both forwards share one batch and one tape. The stop-gradient target is
//! a detached copy of the unpruned velocity, so parameters receive gradient
//! from the unpruned branch only through its flow-matching term.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{make_batch, DiffusionBatch, TimeSampling, VideoSample};
use crate::error::{Error, Result};
use crate::model::{forward, DiTConfig, ModelParams, SkipMask};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{divergence, optimizer_step};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Fresh Bernoulli mask every iteration.
    Stochastic,
    /// Always skip every block outside the keep-set.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub alpha: f64,
    pub p: f64,
    pub mask_mode: MaskMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub label_dropout: f64,
    /// Checkpoint interval in iterations; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            p: 0.5,
            mask_mode: MaskMode::Stochastic,
            lr: 1e-3,
            weight_decay: 0.0,
            iterations: 2000,
            batch_size: 8,
            label_dropout: 0.1,
            checkpoint_every: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.alpha) || !unit.contains(&self.p) || !unit.contains(&self.label_dropout) {
            return Err(Error::Config(format!(
                "alpha, p and label_dropout must lie in [0, 1], got {}, {}, {}",
                self.alpha, self.p, self.label_dropout
            )));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(format!("need lr > 0 and batch_size ≥ 1, got {} and {}", self.lr, self.batch_size)));
        }
        Ok(())
    }
}

fn check_keep_set(n_blocks: usize, keep: &[usize]) -> Result<()> {
    if let Some(&bad) = keep.iter().find(|&&b| b >= n_blocks) {
        return Err(Error::InvalidArgument(format!("keep-set entry {bad} out of range for {n_blocks} blocks")));
    }
    Ok(())
}

/// Skips each block outside `keep` with probability `p`; one draw per such
/// block, in index order.
pub fn sample_skip_mask(n_blocks: usize, keep: &[usize], p: f64, rng: &mut Rng) -> SkipMask {
    let skip = (0..n_blocks).map(|i| !keep.contains(&i) && rng.bernoulli(p)).collect();
    SkipMask { skip }
}

#[derive(Debug, Clone, Copy)]
pub struct Stage2Losses {
    pub training: Var,
    pub distill: Var,
    pub total: Var,
}

/// Records the Stage-II losses on `tape`.
pub fn stage2_losses(
    tape: &mut Tape,
    params: &[Var],
    config: &DiTConfig,
    batch: &DiffusionBatch,
    mask: &SkipMask,
    alpha: f64,
) -> Result<Stage2Losses> {
    stage2_losses_with_target(tape, params, config, batch, mask, alpha, None)
}

/// [`stage2_losses`] with the distillation target optionally replaced by a
/// constant tensor. With `Some(v)` holding the unpruned velocity's value the
/// gradient must match the stop-gradient version exactly.
pub fn stage2_losses_with_target(
    tape: &mut Tape,
    params: &[Var],
    config: &DiTConfig,
    batch: &DiffusionBatch,
    mask: &SkipMask,
    alpha: f64,
    target: Option<&Tensor>,
) -> Result<Stage2Losses> {
    let xt = tape.constant(batch.xt.clone())?;
    let full = SkipMask::none(config.n_blocks);
    let v_unpr = forward(tape, params, config, xt, &batch.t, &batch.labels, &full)?;
    let v_pr = if mask.is_unpruned() {
        v_unpr
    } else {
        forward(tape, params, config, xt, &batch.t, &batch.labels, mask)?
    };
    let zero = || Tensor::scalar(0.0);

    let training = if alpha == 1.0 {
        tape.constant(zero())?
    } else {
        let u = tape.constant(batch.velocity_target())?;
        let fm_pr = tape.mse_loss(v_pr, u)?;
        let fm_unpr = tape.mse_loss(v_unpr, u)?;
        let s = tape.add(fm_pr, fm_unpr)?;
        tape.scale(s, 1.0 - alpha)?
    };
    let distill = if alpha == 0.0 {
        tape.constant(zero())?
    } else {
        let target = match target {
            Some(v) => tape.constant(v.clone())?,
            None => tape.detach(v_unpr)?,
        };
        let d = tape.mse_loss(v_pr, target)?;
        tape.scale(d, alpha)?
    };
    let total = tape.add(training, distill)?;
    Ok(Stage2Losses { training, distill, total })
}

/// Loss values of one Stage-II iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stage2Row {
    pub iteration: usize,
    pub training: f64,
    pub distill: f64,
    pub total: f64,
    pub mask_popcount: usize,
}

/// CSV `iteration,L_training,L_distill,L_total,mask_popcount`.
pub fn stage2_trace_csv(trace: &[Stage2Row]) -> String {
    let mut out = String::from("iteration,L_training,L_distill,L_total,mask_popcount\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{},{}\n", r.iteration, r.training, r.distill, r.total, r.mask_popcount));
    }
    out
}

/// Runs Stage II in place on `params`.
pub fn train_stage2(
    params: &mut ModelParams,
    data: &[VideoSample],
    keep: &[usize],
    config: &Stage2Config,
    seed: u64,
) -> Result<Vec<Stage2Row>> {
    train_stage2_with(params, data, keep, config, seed, |_, _| Ok(()))
}

/// [`train_stage2`] calling `checkpoint(iteration, params)` every
/// `checkpoint_every` completed iterations.
pub fn train_stage2_with(
    params: &mut ModelParams,
    data: &[VideoSample],
    keep: &[usize],
    config: &Stage2Config,
    seed: u64,
    mut checkpoint: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<Vec<Stage2Row>> {
    config.validate()?;
    let n = params.config.n_blocks;
    check_keep_set(n, keep)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        &params.tensors,
    );
    let mut batches = Rng::stream(seed, "batch");
    let mut masks = Rng::stream(seed, "mask");
    let mut dropout = Rng::stream(seed, "dropout");
    let null = params.config.null_label();
    let fixed = SkipMask::from_keep_set(n, keep);
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut batch = make_batch(data, config.batch_size, TimeSampling::Uniform, &mut batches)?;
        batch.drop_labels(config.label_dropout, null, &mut dropout);
        let mask = match config.mask_mode {
            MaskMode::Stochastic => sample_skip_mask(n, keep, config.p, &mut masks),
            MaskMode::Fixed => fixed.clone(),
        };
        let cfg = params.config.clone();
        let (total, (training, distill)) = optimizer_step(params, &mut opt, |tape, vars| {
            let l = stage2_losses(tape, vars, &cfg, &batch, &mask, config.alpha)?;
            Ok((l.total, (tape.value(l.training).item(), tape.value(l.distill).item())))
        })
        .map_err(|e| divergence("stage-2", it, e))?;
        trace.push(Stage2Row {
            iteration: it,
            training,
            distill,
            total,
            mask_popcount: mask.popcount(),
        });
        if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 {
            checkpoint(it + 1, params)?;
        }
    }
    Ok(trace)
}
