//! Flow-matching pretraining of the unpruned teacher.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{make_batch, TimeSampling, VideoSample};
use crate::error::{Error, Result};
use crate::model::{fm_loss, ModelParams, SkipMask};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::Rng;
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Probability of replacing a label by the null label, so the model
    /// also learns the unconditional velocity used by guidance.
    pub label_dropout: f64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            label_dropout: 0.1,
        }
    }
}

impl BaseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::Config(format!(
                "base training needs batch_size ≥ 1, lr > 0 and label_dropout in [0, 1], got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Turns a non-finite intermediate into a divergence error naming the stage.
pub(crate) fn divergence(stage: &str, iteration: usize, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => {
            Error::Divergence(format!("{stage} iteration {iteration}: non-finite value in {op}"))
        }
        other => other,
    }
}

/// Records a loss on a fresh tape, backpropagates and applies one optimizer
/// step to `params`. Returns the loss value and whatever `f` reports beside it.
pub(crate) fn optimizer_step<T>(
    params: &mut ModelParams,
    opt: &mut AdamW,
    f: impl FnOnce(&mut Tape, &[Var]) -> Result<(Var, T)>,
) -> Result<(f64, T)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true)?;
    let (loss, extra) = f(&mut tape, &vars)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Tensor(TensorError::NonFinite { op: "loss" }));
    }
    tape.backward(loss)?;
    let grads: Vec<_> = vars
        .iter()
        .map(|&v| tape.take_grad(v).expect("parameters are leaves"))
        .collect();
    opt.step(&mut params.tensors, &grads)?;
    Ok((value, extra))
}

/// Fits `params` to `data` with flow matching; returns the per-iteration loss.
pub fn train_base(params: &mut ModelParams, data: &[VideoSample], config: &BaseTrainConfig, seed: u64) -> Result<Vec<f64>> {
    config.validate()?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        &params.tensors,
    );
    let mut batches = Rng::stream(seed, "batch");
    let mut dropout = Rng::stream(seed, "dropout");
    let mask = SkipMask::none(params.config.n_blocks);
    let null = params.config.null_label();
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut batch = make_batch(data, config.batch_size, TimeSampling::Uniform, &mut batches)?;
        batch.drop_labels(config.label_dropout, null, &mut dropout);
        let cfg = params.config.clone();
        let (loss, ()) = optimizer_step(params, &mut opt, |tape, vars| {
            Ok((fm_loss(tape, vars, &cfg, &batch, &mask, None)?, ()))
        })
        .map_err(|e| divergence("base training", it, e))?;
        trace.push(loss);
    }
    Ok(trace)
}

/// CSV `iteration,loss`.
pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

/// Mean of the first and last `n` entries of a trace.
pub fn head_tail_means(trace: &[f64], n: usize) -> (f64, f64) {
    let n = n.min(trace.len()).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&trace[..n.min(trace.len())]), mean(&trace[trace.len().saturating_sub(n)..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::model::tests::{tiny_data, tiny_model};

    #[test]
    fn loss_decreases_and_is_reproducible() {
        let data = generate_dataset(&tiny_data(), 64, 0).unwrap();
        let cfg = BaseTrainConfig {
            iterations: 150,
            ..BaseTrainConfig::default()
        };
        let mut a = tiny_model(4, 0);
        let mut b = a.clone();
        let ta = train_base(&mut a, &data, &cfg, 5).unwrap();
        let tb = train_base(&mut b, &data, &cfg, 5).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
        let (head, tail) = head_tail_means(&ta, 20);
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn zero_iterations_leave_params() {
        let data = generate_dataset(&tiny_data(), 8, 0).unwrap();
        let mut p = tiny_model(4, 0);
        let before = p.clone();
        let cfg = BaseTrainConfig {
            iterations: 0,
            ..BaseTrainConfig::default()
        };
        assert!(train_base(&mut p, &data, &cfg, 1).unwrap().is_empty());
        assert_eq!(p, before);
    }

    #[test]
    fn huge_learning_rate_is_reported_as_divergence() {
        let data = generate_dataset(&tiny_data(), 16, 0).unwrap();
        let mut p = tiny_model(4, 0);
        let cfg = BaseTrainConfig {
            iterations: 200,
            lr: 1e300,
            ..BaseTrainConfig::default()
        };
        let err = train_base(&mut p, &data, &cfg, 1).unwrap_err();
        assert_eq!(err.exit_code(), 4, "{err}");
    }
}
