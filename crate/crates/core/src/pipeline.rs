//! Stage orchestration shared by the command-line harness, the sweep and
//! the end-to-end tests.
//!
//! Every stage draws its randomness from a seed derived from the run seed
//! and the stage name, so running the stages one command at a time gives
//! the same artifacts as [`run_pipeline`].

use serde::Serialize;

use crate::codistill::{distill_loop, DistillRow, DistillState};
use crate::config::RunConfig;
use crate::data::{generate_dataset, VideoSample};
use crate::error::Result;
use crate::importance::{importance_report, ImportanceReport};
use crate::metrics::{default_speedup, MetricReport};
use crate::model::{default_schedule, euler_sample, few_step_sample, fm_loss_value, ModelParams, SkipMask};
use crate::prune_train::{train_stage2_with, Stage2Row};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;
use crate::train::train_base;

/// Samples generated per forward batch during evaluation.
const EVAL_CHUNK: usize = 64;

pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    derive_seed(seed, stage, 0)
}

pub fn training_set(cfg: &RunConfig, seed: u64) -> Result<Vec<VideoSample>> {
    generate_dataset(&cfg.data, cfg.dataset.n_train, stage_seed(seed, "train-data"))
}

pub fn heldout_set(cfg: &RunConfig, seed: u64) -> Result<Vec<VideoSample>> {
    generate_dataset(&cfg.data, cfg.dataset.n_heldout, stage_seed(seed, "heldout-data"))
}

/// Initializes and fits the unpruned teacher.
pub fn stage_base(cfg: &RunConfig, train: &[VideoSample], seed: u64) -> Result<(ModelParams, Vec<f64>)> {
    let mut params = ModelParams::init(&cfg.dit()?, stage_seed(seed, "init"));
    let trace = train_base(&mut params, train, &cfg.base, stage_seed(seed, "base"))?;
    Ok((params, trace))
}

pub fn stage_importance(cfg: &RunConfig, base: &ModelParams, train: &[VideoSample], seed: u64) -> Result<ImportanceReport> {
    importance_report(base, train, &cfg.importance, stage_seed(seed, "importance"))
}

pub fn stage_prune(
    cfg: &RunConfig,
    base: &ModelParams,
    train: &[VideoSample],
    keep: &[usize],
    seed: u64,
    checkpoint: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<(ModelParams, Vec<Stage2Row>)> {
    let mut params = base.clone();
    let trace = train_stage2_with(&mut params, train, keep, &cfg.stage2, stage_seed(seed, "stage2"), checkpoint)?;
    Ok((params, trace))
}

pub fn stage_distill(cfg: &RunConfig, stage2: &ModelParams, pruned: &SkipMask, seed: u64) -> Result<(DistillState, Vec<DistillRow>)> {
    let mut state = DistillState::new(stage2.clone(), pruned.clone(), cfg.distill.clone())?;
    let rows = distill_loop(&mut state, cfg.distill.iterations, stage_seed(seed, "distill"))?;
    Ok((state, rows))
}

/// Conditioning labels for evaluation: the held-out labels, cycled.
pub fn eval_labels(heldout: &[VideoSample], n: usize) -> Vec<usize> {
    (0..n).map(|i| heldout[i % heldout.len()].label).collect()
}

fn chunked(labels: &[usize], seed: u64, mut f: impl FnMut(&[usize], &mut Rng) -> Result<Tensor>) -> Result<Vec<Tensor>> {
    let mut rng = Rng::stream(seed, "eval");
    let mut out = Vec::with_capacity(labels.len());
    for chunk in labels.chunks(EVAL_CHUNK) {
        out.extend(f(chunk, &mut rng)?.unstack());
    }
    Ok(out)
}

/// Few-step samples on the default `K`-step schedule.
pub fn sample_few_step(params: &ModelParams, labels: &[usize], steps: usize, mask: &SkipMask, seed: u64) -> Result<Vec<Tensor>> {
    let schedule = default_schedule(steps);
    chunked(labels, seed, |c, rng| few_step_sample(params, c, &schedule, mask, rng))
}

/// Guided Euler samples.
pub fn sample_euler(params: &ModelParams, labels: &[usize], steps: usize, cfg_scale: f64, mask: &SkipMask, seed: u64) -> Result<Vec<Tensor>> {
    chunked(labels, seed, |c, rng| euler_sample(params, c, steps, cfg_scale, mask, rng))
}

pub fn heldout_tensors(heldout: &[VideoSample]) -> Vec<Tensor> {
    heldout.iter().map(|s| s.x0.clone()).collect()
}

/// Mean flow-matching loss of `params` under `mask` over fixed held-out batches.
pub fn heldout_fm_loss(params: &ModelParams, heldout: &[VideoSample], mask: &SkipMask, seed: u64) -> Result<f64> {
    let mut rng = Rng::stream(seed, "heldout-fm");
    let batch = heldout.len().min(16);
    let mut total = 0.0;
    let rounds = 8;
    for _ in 0..rounds {
        let b = crate::data::make_batch(heldout, batch, crate::data::TimeSampling::Uniform, &mut rng)?;
        total += fm_loss_value(params, &b, mask)?;
    }
    Ok(total / rounds as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub config_fingerprint: String,
    pub base_loss_first: f64,
    pub base_loss_last: f64,
    pub importance: ImportanceReport,
    pub ushape_ratio: Option<f64>,
    pub retention: f64,
    pub speedup: f64,
    /// Held-out flow-matching loss of the Stage-II model, fully pruned and unpruned.
    pub stage2_fm_pruned: f64,
    pub stage2_fm_unpruned: f64,
    /// The Stage-II model sampled with the pruned mask at `K` steps, before distillation.
    pub untrained_pruned: MetricReport,
    pub distilled: MetricReport,
    /// Unpruned teacher, Euler with the configured guidance scale.
    pub teacher: MetricReport,
    /// Unpruned teacher, Euler without guidance.
    pub teacher_unguided: MetricReport,
    /// Held-out data against a second independent draw of the data distribution.
    pub data_floor: f64,
}

impl PipelineReport {
    /// Distilled energy distance over the untrained pruned generator's.
    pub fn improvement_ratio(&self) -> f64 {
        self.distilled.energy_distance / self.untrained_pruned.energy_distance
    }

    /// Distilled energy distance over the guided teacher's.
    pub fn teacher_ratio(&self) -> f64 {
        self.distilled.energy_distance / self.teacher.energy_distance
    }
}

/// Outputs of a full pipeline run.
pub struct PipelineRun {
    pub report: PipelineReport,
    pub base: ModelParams,
    pub stage2: ModelParams,
    pub generator: ModelParams,
    pub base_trace: Vec<f64>,
    pub stage2_trace: Vec<Stage2Row>,
    pub distill_trace: Vec<DistillRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Base training, block scoring, Stage II, Stage III and evaluation.
pub fn run_pipeline(cfg: &RunConfig, seed: u64) -> Result<PipelineRun> {
    cfg.validate()?;
    let train = training_set(cfg, seed)?;
    let heldout = heldout_set(cfg, seed)?;
    let (base, base_trace) = stage_base(cfg, &train, seed)?;
    let importance = stage_importance(cfg, &base, &train, seed)?;
    let pruned = importance.skip_mask();
    let (stage2, stage2_trace) = stage_prune(cfg, &base, &train, &importance.keep_set, seed, |_, _| Ok(()))?;
    let (state, distill_trace) = stage_distill(cfg, &stage2, &pruned, seed)?;

    let eval_seed = stage_seed(seed, "eval");
    let labels = eval_labels(&heldout, cfg.eval.n_samples);
    let reference = heldout_tensors(&heldout);
    let k = cfg.distill.steps;
    let fp = cfg.fingerprint();
    let full = SkipMask::none(cfg.model.n_blocks);
    let evaluate = |samples: Vec<Tensor>| MetricReport::evaluate(&samples, &reference, fp.clone());

    let untrained_pruned = evaluate(sample_few_step(&stage2, &labels, k, &pruned, eval_seed)?)?;
    let distilled = evaluate(sample_few_step(&state.generator, &labels, k, &pruned, eval_seed)?)?;
    let teacher = evaluate(sample_euler(&base, &labels, cfg.eval.teacher_steps, cfg.eval.teacher_cfg, &full, eval_seed)?)?;
    let teacher_unguided = evaluate(sample_euler(&base, &labels, cfg.eval.teacher_steps, 1.0, &full, eval_seed)?)?;
    let fresh = generate_dataset(&cfg.data, cfg.dataset.n_heldout, stage_seed(seed, "floor-data"))?;
    let data_floor = crate::metrics::energy_distance(&heldout_tensors(&fresh), &reference)?;

    let retention = stage2.retention_ratio(&pruned);
    let head = base_trace.len().min(50);
    let report = PipelineReport {
        seed,
        config_fingerprint: fp.clone(),
        base_loss_first: mean(&base_trace[..head]),
        base_loss_last: mean(&base_trace[base_trace.len() - head..]),
        ushape_ratio: crate::importance::ushape_diagnostic(&importance.scores).map(|u| u.ratio),
        importance,
        retention,
        speedup: default_speedup(k, retention)?,
        stage2_fm_pruned: heldout_fm_loss(&stage2, &heldout, &pruned, eval_seed)?,
        stage2_fm_unpruned: heldout_fm_loss(&stage2, &heldout, &full, eval_seed)?,
        untrained_pruned,
        distilled,
        teacher,
        teacher_unguided,
        data_floor,
    };
    Ok(PipelineRun {
        report,
        base,
        stage2,
        generator: state.generator,
        base_trace,
        stage2_trace,
        distill_trace,
    })
}
