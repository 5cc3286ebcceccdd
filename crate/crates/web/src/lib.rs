//! Browser bindings: the speedup formula, the toy clip generator, and a
//! tiny model trained, scored and sampled inside the page.

use codistill::data::{generate_dataset, render_video, DataConfig, VideoSample};
use codistill::importance::{importance_report, ImportanceConfig};
use codistill::metrics::default_speedup;
use codistill::model::{default_schedule, euler_sample, few_step_sample, DiTConfig, ModelParams, ModelShape, SkipMask};
use codistill::rng::Rng;
use codistill::train::{train_base, BaseTrainConfig};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Speedup of a `steps`-step student keeping `retention` of the parameters
/// over 50-step sampling with classifier-free guidance.
#[wasm_bindgen]
pub fn speedup(steps: u32, retention: f64) -> Result<f64, JsError> {
    default_speedup(steps as usize, retention).map_err(js_err)
}

fn demo_data() -> DataConfig {
    DataConfig {
        grid_h: 6,
        grid_w: 6,
        frames: 6,
        n_classes: 4,
        ..DataConfig::default()
    }
}

#[wasm_bindgen]
pub fn grid_size() -> u32 {
    demo_data().grid_h as u32
}

#[wasm_bindgen]
pub fn frame_count() -> u32 {
    demo_data().frames as u32
}

/// A clean clip of `class` starting at `(row, col)`, frames concatenated.
#[wasm_bindgen]
pub fn render_clip(class: u32, row: f64, col: f64) -> Result<Vec<f64>, JsError> {
    let cfg = demo_data();
    if class as usize >= cfg.n_classes {
        return Err(js_err(format!("class must be below {}", cfg.n_classes)));
    }
    Ok(render_video(&cfg, class as usize, row, col).into_data())
}

/// A small model with its training set, trained in short rounds.
#[wasm_bindgen]
pub struct Lab {
    params: ModelParams,
    train: Vec<VideoSample>,
    rounds: u64,
    seed: u64,
    keep: Vec<usize>,
}

#[wasm_bindgen]
impl Lab {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Lab, JsError> {
        let data = demo_data();
        let shape = ModelShape {
            n_blocks: 4,
            hidden_dim: 24,
            time_embed_dim: 16,
            mlp_ratio: 2,
        };
        let config = DiTConfig::new(&data, &shape).map_err(js_err)?;
        let seed = seed as u64;
        Ok(Lab {
            params: ModelParams::init(&config, seed),
            train: generate_dataset(&data, 128, seed).map_err(js_err)?,
            rounds: 0,
            seed,
            keep: (0..shape.n_blocks).collect(),
        })
    }

    /// Runs `iterations` flow-matching steps and returns their mean loss.
    pub fn train(&mut self, iterations: u32) -> Result<f64, JsError> {
        let cfg = BaseTrainConfig {
            iterations: iterations.max(1) as usize,
            batch_size: 16,
            lr: 3e-3,
            ..BaseTrainConfig::default()
        };
        self.rounds += 1;
        let trace = train_base(&mut self.params, &self.train, &cfg, self.seed ^ self.rounds).map_err(js_err)?;
        Ok(trace.iter().sum::<f64>() / trace.len() as f64)
    }

    /// Scores every block and keeps the `keep` most important; returns the scores.
    pub fn score_blocks(&mut self, keep: u32) -> Result<Vec<f64>, JsError> {
        let cfg = ImportanceConfig {
            n_samples: 4,
            batch_size: 8,
            n_short: keep as usize,
            ..ImportanceConfig::default()
        };
        let report = importance_report(&self.params, &self.train, &cfg, self.seed).map_err(js_err)?;
        self.keep = report.keep_set.clone();
        Ok(report.scores)
    }

    /// Blocks currently kept by [`Lab::score_blocks`].
    pub fn kept_blocks(&self) -> Vec<u32> {
        self.keep.iter().map(|&b| b as u32).collect()
    }

    /// One clip of `class`. With `few_step` the pruned model runs the
    /// re-noising sampler; otherwise the full model runs guided Euler.
    pub fn sample(&self, class: u32, steps: u32, guidance: f64, few_step: bool, seed: u32) -> Result<Vec<f64>, JsError> {
        let n = self.params.config.n_blocks;
        if class as usize >= self.params.config.n_classes {
            return Err(js_err(format!("class must be below {}", self.params.config.n_classes)));
        }
        let mut rng = Rng::new(seed as u64);
        let steps = steps.max(1) as usize;
        let cond = [class as usize];
        let out = if few_step {
            few_step_sample(&self.params, &cond, &default_schedule(steps), &SkipMask::from_keep_set(n, &self.keep), &mut rng)
        } else {
            euler_sample(&self.params, &cond, steps, guidance, &SkipMask::none(n), &mut rng)
        };
        Ok(out.map_err(js_err)?.into_data())
    }
}
