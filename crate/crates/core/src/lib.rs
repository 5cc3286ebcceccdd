//! Step-and-size co-distillation of a toy flow-matching video transformer.
//!
//! The pipeline has a pretraining step and three compression stages:
//!
//! 0. [`train::train_base`] fits the unpruned teacher with flow matching.
//! 1. [`importance`] scores every block by the x₀-reconstruction error when
//!    it alone is skipped, ranks blocks and keeps the top `n_short`.
//! 2. [`prune_train`] fine-tunes one parameter set under Bernoulli block
//!    skipping with a stop-gradient self-distillation loss.
//! 3. [`codistill`] distills a few-step pruned generator with distribution
//!    matching against a teacher that blends pruned and unpruned velocities.
//!
//! [`metrics`] holds the speedup arithmetic and the toy quality metrics,
//! [`pipeline`] chains the stages, and [`checkpoint`]/[`config`] provide
//! persistence for the command-line harness.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod autodiff;
pub mod checkpoint;
pub mod codistill;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod importance;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod prune_train;
pub mod rng;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Tensor, TensorError};
