//! Steps × retention sweep.
//!
//! The base model is trained once per sweep. Every cell then runs block
//! selection at its retention, Stage II, Stage III at its step count and an
//! evaluation, seeded with `seed ^ cell_index`, so a cell's result does not
//! depend on which thread runs it or in what order.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::RunConfig;
use crate::data::VideoSample;
use crate::error::{Error, Result};
use crate::metrics::{default_speedup, MetricReport, SweepCell};
use crate::model::ModelParams;
use crate::pipeline::{eval_labels, heldout_set, heldout_tensors, sample_few_step, stage_base, stage_distill, stage_prune, stage_seed, training_set};

/// Shared inputs of all cells.
struct SweepContext<'a> {
    cfg: &'a RunConfig,
    base: ModelParams,
    train: Vec<VideoSample>,
    heldout: Vec<VideoSample>,
    fingerprint: String,
}

fn run_cell(ctx: &SweepContext, steps: usize, retention: f64, cell_seed: u64, cell: &mut SweepCell) -> Result<MetricReport> {
    let mut cfg = ctx.cfg.clone();
    cfg.importance.retention = Some(retention);
    cfg.distill.steps = steps;
    let importance = crate::pipeline::stage_importance(&cfg, &ctx.base, &ctx.train, cell_seed)?;
    let pruned = importance.skip_mask();
    cell.n_short = importance.n_short;
    cell.achieved_retention = ctx.base.retention_ratio(&pruned);
    let (stage2, _) = stage_prune(&cfg, &ctx.base, &ctx.train, &importance.keep_set, cell_seed, |_, _| Ok(()))?;
    let (state, _) = stage_distill(&cfg, &stage2, &pruned, cell_seed)?;
    let labels = eval_labels(&ctx.heldout, cfg.eval.n_samples);
    let samples = sample_few_step(&state.generator, &labels, steps, &pruned, stage_seed(cell_seed, "eval"))?;
    MetricReport::evaluate(&samples, &heldout_tensors(&ctx.heldout), ctx.fingerprint.clone())
}

/// Runs every `(K, ρ)` cell of `cfg.sweep` with at most `cfg.sweep.jobs`
/// cells in flight. Cells are returned in grid order; a failed cell keeps
/// its error message and the sweep continues.
pub fn run_sweep(cfg: &RunConfig, seed: u64) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    if cfg.sweep.jobs == 0 {
        return Err(Error::Config("sweep.jobs must be at least 1".into()));
    }
    let train = training_set(cfg, seed)?;
    let heldout = heldout_set(cfg, seed)?;
    let (base, _) = stage_base(cfg, &train, seed)?;
    let ctx = SweepContext {
        cfg,
        base,
        train,
        heldout,
        fingerprint: cfg.fingerprint(),
    };

    let grid: Vec<(usize, f64)> = cfg
        .sweep
        .steps
        .iter()
        .flat_map(|&k| cfg.sweep.retention.iter().map(move |&r| (k, r)))
        .collect();
    let results: Mutex<Vec<Option<SweepCell>>> = Mutex::new(vec![None; grid.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(steps, retention)) = grid.get(i) else { break };
        let mut cell = SweepCell {
            steps,
            retention,
            achieved_retention: f64::NAN,
            n_short: 0,
            speedup: default_speedup(steps, retention).unwrap_or(f64::NAN),
            metrics: Err(String::new()),
        };
        cell.metrics = run_cell(&ctx, steps, retention, seed ^ i as u64, &mut cell).map_err(|e| e.to_string());
        results.lock().expect("no worker panics while holding the lock")[i] = Some(cell);
    };
    std::thread::scope(|s| {
        for _ in 0..cfg.sweep.jobs.min(grid.len()) {
            s.spawn(worker);
        }
    });
    Ok(results
        .into_inner()
        .expect("workers have finished")
        .into_iter()
        .map(|c| c.expect("every cell was claimed"))
        .collect())
}
