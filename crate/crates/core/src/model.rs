//! Toy flow-matching transformer with per-block skipping.
//!
//! Input tokens are frames (`[B, frames, grid_h·grid_w]`). `g1` projects
//! tokens to the hidden width and adds a learned frame position table;
//! each block applies modulated single-head self-attention over frames and
//! a modulated MLP, both as gated residuals; `g2` normalizes and projects
//! back to token space. Conditioning is a sinusoidal time embedding plus a
//! class embedding row, where row `n_classes` is the null prompt.
//!
//! A skipped block is not evaluated at all, which makes it an exact
//! identity on the hidden state.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{DataConfig, DiffusionBatch, T_MAX, T_MIN};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Width-related model hyperparameters, as they appear in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub n_blocks: usize,
    pub hidden_dim: usize,
    pub time_embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            n_blocks: 12,
            hidden_dim: 64,
            time_embed_dim: 32,
            mlp_ratio: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiTConfig {
    pub n_blocks: usize,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub frames: usize,
    pub n_classes: usize,
    pub time_embed_dim: usize,
    pub mlp_ratio: usize,
}

impl DiTConfig {
    pub fn new(data: &DataConfig, shape: &ModelShape) -> Result<Self> {
        let cfg = Self {
            n_blocks: shape.n_blocks,
            token_dim: data.token_dim(),
            hidden_dim: shape.hidden_dim,
            frames: data.frames,
            n_classes: data.n_classes,
            time_embed_dim: shape.time_embed_dim,
            mlp_ratio: shape.mlp_ratio,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Like [`DiTConfig::new`] but without the size floor on `n_blocks`,
    /// for small gradient-check models.
    pub fn unchecked(data: &DataConfig, shape: &ModelShape) -> Self {
        Self {
            n_blocks: shape.n_blocks,
            token_dim: data.token_dim(),
            hidden_dim: shape.hidden_dim,
            frames: data.frames,
            n_classes: data.n_classes,
            time_embed_dim: shape.time_embed_dim,
            mlp_ratio: shape.mlp_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks < 4 {
            return Err(Error::Config(format!("n_blocks must be at least 4, got {}", self.n_blocks)));
        }
        if self.hidden_dim < 8 {
            return Err(Error::Config(format!("hidden_dim must be at least 8, got {}", self.hidden_dim)));
        }
        if self.time_embed_dim < 2 || self.mlp_ratio == 0 {
            return Err(Error::Config("time_embed_dim must be >= 2 and mlp_ratio >= 1".into()));
        }
        Ok(())
    }

    pub fn null_label(&self) -> usize {
        self.n_classes
    }

    fn mlp_dim(&self) -> usize {
        self.hidden_dim * self.mlp_ratio
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h, m) = (self.token_dim, self.hidden_dim, self.mlp_dim());
        let mut out = vec![
            ("g1/W".to_string(), vec![d, h]),
            ("g1/b".to_string(), vec![h]),
            ("g1/pos".to_string(), vec![self.frames, h]),
            ("embed/time".to_string(), vec![self.time_embed_dim, h]),
            ("embed/class".to_string(), vec![self.n_classes + 1, h]),
        ];
        for i in 0..self.n_blocks {
            let p = |s: &str| format!("block/{i}/{s}");
            out.extend([
                (p("attn/Wq"), vec![h, h]),
                (p("attn/Wk"), vec![h, h]),
                (p("attn/Wv"), vec![h, h]),
                (p("attn/Wo"), vec![h, h]),
                (p("mlp/W1"), vec![h, m]),
                (p("mlp/b1"), vec![m]),
                (p("mlp/W2"), vec![m, h]),
                (p("mod/W"), vec![h, 6 * h]),
                (p("mod/b"), vec![6 * h]),
            ]);
        }
        out.push(("g2/W".to_string(), vec![h, d]));
        out.push(("g2/b".to_string(), vec![d]));
        out
    }
}

const HEAD: usize = 5;
const PER_BLOCK: usize = 9;

#[derive(Clone, Copy)]
struct BlockSlots {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    mod_w: usize,
    mod_b: usize,
}

fn block_slots(i: usize) -> BlockSlots {
    let b = HEAD + PER_BLOCK * i;
    BlockSlots {
        wq: b,
        wk: b + 1,
        wv: b + 2,
        wo: b + 3,
        w1: b + 4,
        b1: b + 5,
        w2: b + 6,
        mod_w: b + 7,
        mod_b: b + 8,
    }
}

/// Per-block skip flags; the all-false mask is the unpruned model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SkipMask {
    pub skip: Vec<bool>,
}

impl SkipMask {
    pub fn none(n_blocks: usize) -> Self {
        Self { skip: vec![false; n_blocks] }
    }

    pub fn all(n_blocks: usize) -> Self {
        Self { skip: vec![true; n_blocks] }
    }

    /// Skips every block not in `keep`.
    pub fn from_keep_set(n_blocks: usize, keep: &[usize]) -> Self {
        let mut skip = vec![true; n_blocks];
        for &k in keep {
            if k < n_blocks {
                skip[k] = false;
            }
        }
        Self { skip }
    }

    pub fn only(n_blocks: usize, block: usize) -> Self {
        let mut m = Self::none(n_blocks);
        m.skip[block] = true;
        m
    }

    pub fn len(&self) -> usize {
        self.skip.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skip.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.skip.iter().filter(|&&s| s).count()
    }

    pub fn retained(&self) -> usize {
        self.len() - self.popcount()
    }

    pub fn is_unpruned(&self) -> bool {
        self.popcount() == 0
    }
}

/// Parameters of one model instance, stored in [`DiTConfig::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: DiTConfig,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Random initialization: weights `N(0, 1/fan_in)`, biases zero,
    /// position and class tables `N(0, 0.25)`.
    pub fn init(config: &DiTConfig, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, "init");
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with("/b") || name.ends_with("/b1") {
                    vec![0.0; n]
                } else if name == "g1/pos" || name == "embed/class" {
                    rng.normal_vec(n).into_iter().map(|v| 0.5 * v).collect()
                } else {
                    let std = (1.0 / shape[0] as f64).sqrt();
                    rng.normal_vec(n).into_iter().map(|v| std * v).collect()
                };
                Tensor::new(shape, data).expect("layout shapes are consistent")
            })
            .collect();
        Self {
            config: config.clone(),
            tensors,
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        let idx = self.config.layout().iter().position(|(n, _)| n == name)?;
        self.tensors.get(idx)
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names().into_iter().zip(self.tensors.iter().cloned()).collect()
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against `config`.
    pub fn from_named(config: &DiTConfig, named: &[(String, Tensor)]) -> Result<Self> {
        let layout = config.layout();
        if layout.len() != named.len() {
            return Err(Error::Precondition(format!(
                "checkpoint holds {} tensors, model config expects {}",
                named.len(),
                layout.len()
            )));
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for ((name, shape), (got_name, t)) in layout.iter().zip(named) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Precondition(format!(
                    "checkpoint tensor {got_name} {:?} does not match model tensor {name} {shape:?}",
                    t.shape()
                )));
            }
            tensors.push(t.clone());
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn to_checkpoint(&self, mut metadata: serde_json::Value) -> Checkpoint {
        if let Some(obj) = metadata.as_object_mut() {
            obj.insert("dit".into(), serde_json::to_value(&self.config).expect("config serializes"));
        }
        Checkpoint::new(self.named(), metadata)
    }

    /// Loads parameters; the stored model config must equal `config`.
    pub fn from_checkpoint(config: &DiTConfig, ck: &Checkpoint) -> Result<Self> {
        let stored: DiTConfig = serde_json::from_value(ck.metadata.get("dit").cloned().unwrap_or_default())
            .map_err(|_| Error::Precondition("checkpoint metadata carries no model config".into()))?;
        if &stored != config {
            return Err(Error::Precondition(format!(
                "checkpoint model config {stored:?} differs from requested {config:?}"
            )));
        }
        Self::from_named(config, &ck.tensors)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn block_param_count(&self, block: usize) -> usize {
        let b = HEAD + PER_BLOCK * block;
        self.tensors[b..b + PER_BLOCK].iter().map(Tensor::numel).sum()
    }

    /// Fraction of parameters used by the masked model; `g1`, `g2` and the
    /// embeddings always count as retained.
    pub fn retention_ratio(&self, mask: &SkipMask) -> f64 {
        retention_ratio(&self.config, mask)
    }

    /// SHA-256 over every parameter's little-endian bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Zeroes the output projections (`Wo`, `W2`) of a block so both of
    /// its residual branches contribute exactly nothing.
    pub fn zero_block_residual(&mut self, block: usize) {
        let s = block_slots(block);
        for idx in [s.wo, s.w2] {
            self.tensors[idx].data_mut().fill(0.0);
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
                .map_err(Error::from)
            })
            .collect()
    }

    /// Velocity for a batch `xt: [B, frames, tokens]` without gradients.
    pub fn velocity(&self, xt: &Tensor, t: &[f64], cond: &[usize], mask: &SkipMask) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let x = tape.constant(xt.clone())?;
        let v = forward(&mut tape, &vars, &self.config, x, t, cond, mask)?;
        Ok(tape.value(v).clone())
    }
}

pub fn retention_ratio(config: &DiTConfig, mask: &SkipMask) -> f64 {
    let layout = config.layout();
    let sizes: Vec<usize> = layout.iter().map(|(_, s)| s.iter().product()).collect();
    let total: usize = sizes.iter().sum();
    let per_block: usize = sizes[HEAD..HEAD + PER_BLOCK].iter().sum();
    let skipped = mask.skip.iter().filter(|&&s| s).count() * per_block;
    (total - skipped) as f64 / total as f64
}

/// Sinusoidal features of `1000·t`, `[B, dim]`.
pub fn time_features(t: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let arg = 1000.0 * ti;
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            data.push((arg * freq).sin());
        }
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            data.push((arg * freq).cos());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::new(vec![t.len(), dim], data).expect("feature count matches")
}

/// Records the velocity of `xt: [B, frames, tokens]` on `tape`.
pub fn forward(
    tape: &mut Tape,
    params: &[Var],
    config: &DiTConfig,
    xt: Var,
    t: &[f64],
    cond: &[usize],
    mask: &SkipMask,
) -> Result<Var> {
    if mask.len() != config.n_blocks {
        return Err(Error::InvalidArgument(format!(
            "skip mask has {} entries for {} blocks",
            mask.len(),
            config.n_blocks
        )));
    }
    let batch = t.len();
    let shape = tape.value(xt).shape().to_vec();
    if shape != [batch, config.frames, config.token_dim] || cond.len() != batch {
        return Err(Error::InvalidArgument(format!(
            "input {shape:?} with {} times and {} labels does not fit frames={} tokens={}",
            batch,
            cond.len(),
            config.frames,
            config.token_dim
        )));
    }
    if let Some(&bad) = cond.iter().find(|&&c| c > config.n_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} exceeds the null label {}", config.n_classes)));
    }
    let h_dim = config.hidden_dim;

    let mut h = tape.matmul(xt, params[0])?;
    h = tape.add_bias(h, params[1])?;
    h = tape.add_bias(h, params[2])?;

    let tf = tape.constant(time_features(t, config.time_embed_dim))?;
    let te = tape.matmul(tf, params[3])?;
    let ce = tape.gather_rows(params[4], cond)?;
    let c = tape.add(te, ce)?;
    let c = tape.silu(c)?;

    let attn_scale = 1.0 / (h_dim as f64).sqrt();
    for (i, &skipped) in mask.skip.iter().enumerate() {
        if skipped {
            continue;
        }
        let s = block_slots(i);
        let m = tape.matmul(c, params[s.mod_w])?;
        let m = tape.add_bias(m, params[s.mod_b])?;
        let chunk = |tape: &mut Tape, j: usize| tape.slice_last(m, j * h_dim, h_dim);
        let (shift1, scale1, gate1) = (chunk(tape, 0)?, chunk(tape, 1)?, chunk(tape, 2)?);
        let (shift2, scale2, gate2) = (chunk(tape, 3)?, chunk(tape, 4)?, chunk(tape, 5)?);

        let hn = modulate(tape, h, shift1, scale1)?;
        let q = tape.matmul(hn, params[s.wq])?;
        let k = tape.matmul(hn, params[s.wk])?;
        let v = tape.matmul(hn, params[s.wv])?;
        let scores = tape.bmm_nt(q, k)?;
        let scores = tape.scale(scores, attn_scale)?;
        let probs = tape.softmax(scores)?;
        let mixed = tape.bmm(probs, v)?;
        let a = tape.matmul(mixed, params[s.wo])?;
        let a = tape.mul_rows(a, gate1)?;
        h = tape.add(h, a)?;

        let hn = modulate(tape, h, shift2, scale2)?;
        let u = tape.matmul(hn, params[s.w1])?;
        let u = tape.add_bias(u, params[s.b1])?;
        let u = tape.silu(u)?;
        let u = tape.matmul(u, params[s.w2])?;
        let u = tape.mul_rows(u, gate2)?;
        h = tape.add(h, u)?;
    }

    let tail = HEAD + PER_BLOCK * config.n_blocks;
    let hn = tape.layer_norm(h)?;
    let out = tape.matmul(hn, params[tail])?;
    Ok(tape.add_bias(out, params[tail + 1])?)
}

fn modulate(tape: &mut Tape, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let hn = tape.layer_norm(h)?;
    let s = tape.add_scalar(scale, 1.0)?;
    let hn = tape.mul_rows(hn, s)?;
    Ok(tape.add_rows(hn, shift)?)
}

/// `x̂0 = xt − t·v`, with one `t` per leading-axis sample.
pub fn x0_from_velocity(xt: &Tensor, t: &[f64], v: &Tensor) -> Result<Tensor> {
    if xt.shape() != v.shape() {
        return Err(Error::InvalidArgument(format!("xt {:?} vs v {:?}", xt.shape(), v.shape())));
    }
    let per = xt.numel() / t.len().max(1);
    if per * t.len() != xt.numel() {
        return Err(Error::InvalidArgument(format!("{} times for shape {:?}", t.len(), xt.shape())));
    }
    let data = xt
        .data()
        .iter()
        .zip(v.data())
        .enumerate()
        .map(|(i, (&x, &vv))| x - t[i / per] * vv)
        .collect();
    Ok(Tensor::new(xt.shape().to_vec(), data)?)
}

/// Per-sample loss weight as a function of `t`.
pub type LossWeight<'a> = &'a dyn Fn(f64) -> f64;

/// Flow-matching loss `mean_b α(t_b)·mean‖v(x_t) − (x1 − x0)‖²` recorded on `tape`.
pub fn fm_loss(
    tape: &mut Tape,
    params: &[Var],
    config: &DiTConfig,
    batch: &DiffusionBatch,
    mask: &SkipMask,
    weight: Option<LossWeight>,
) -> Result<Var> {
    let xt = tape.constant(batch.xt.clone())?;
    let v = forward(tape, params, config, xt, &batch.t, &batch.labels, mask)?;
    let target = tape.constant(batch.velocity_target())?;
    Ok(match weight {
        None => tape.mse_loss(v, target)?,
        Some(w) => tape.weighted_mse_loss(v, target, batch.t.iter().map(|&t| w(t)).collect())?,
    })
}

/// Evaluates [`fm_loss`] without recording gradients.
pub fn fm_loss_value(params: &ModelParams, batch: &DiffusionBatch, mask: &SkipMask) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false)?;
    let l = fm_loss(&mut tape, &vars, &params.config, batch, mask, None)?;
    Ok(tape.value(l).item())
}

/// `v(∅) + w·(v(c) − v(∅))`; `w == 1` evaluates only the conditional branch.
pub fn cfg_velocity(params: &ModelParams, x: &Tensor, t: &[f64], cond: &[usize], w: f64, mask: &SkipMask) -> Result<Tensor> {
    if w == 1.0 {
        return params.velocity(x, t, cond, mask);
    }
    let null = vec![params.config.null_label(); cond.len()];
    let vn = params.velocity(x, t, &null, mask)?;
    if w == 0.0 {
        return Ok(vn);
    }
    let vc = params.velocity(x, t, cond, mask)?;
    Ok(vn.zip_map(&vc, |n, c| n + w * (c - n))?)
}

fn noise_like(config: &DiTConfig, batch: usize, rng: &mut Rng) -> Tensor {
    let shape = vec![batch, config.frames, config.token_dim];
    let n = shape.iter().product();
    Tensor::new(shape, rng.normal_vec(n)).expect("noise shape")
}

/// Uniform Euler integration from `t = 0.999` down to `0.001` with
/// classifier-free guidance scale `w`.
pub fn euler_sample(params: &ModelParams, cond: &[usize], steps: usize, w: f64, mask: &SkipMask, rng: &mut Rng) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::InvalidArgument("Euler sampling needs at least one step".into()));
    }
    if !(w >= 0.0) {
        return Err(Error::InvalidArgument(format!("guidance scale must be non-negative, got {w}")));
    }
    let mut x = noise_like(&params.config, cond.len(), rng);
    let dt = (T_MAX - T_MIN) / steps as f64;
    for j in 0..steps {
        let t = T_MAX - j as f64 * dt;
        let v = cfg_velocity(params, &x, &vec![t; cond.len()], cond, w, mask)?;
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi -= dt * vi;
        }
    }
    Ok(x)
}

/// `t_k = k/K` for `k = K..1`, with the first entry capped at 0.999.
pub fn default_schedule(steps: usize) -> Vec<f64> {
    (1..=steps).rev().map(|k| (k as f64 / steps as f64).min(T_MAX)).collect()
}

fn check_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::InvalidArgument("empty sampling schedule".into()));
    }
    let ok = schedule.iter().all(|&t| t > 0.0 && t <= 1.0) && schedule.windows(2).all(|w| w[0] > w[1]);
    if !ok {
        return Err(Error::InvalidArgument(format!("schedule {schedule:?} must decrease strictly within (0, 1]")));
    }
    Ok(())
}

/// Runs the first `stop` steps of the few-step sampler and returns the
/// state fed to step `stop` (at time `schedule[stop]`).
pub fn few_step_prefix(
    params: &ModelParams,
    cond: &[usize],
    schedule: &[f64],
    mask: &SkipMask,
    stop: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let shape = [cond.len(), params.config.frames, params.config.token_dim];
    few_step_prefix_with(|x, t| params.velocity(x, t, cond, mask), &shape, schedule, stop, rng)
}

/// [`few_step_prefix`] over an arbitrary velocity function of `(x, t)`.
pub fn few_step_prefix_with<F>(velocity: F, shape: &[usize], schedule: &[f64], stop: usize, rng: &mut Rng) -> Result<Tensor>
where
    F: Fn(&Tensor, &[f64]) -> Result<Tensor>,
{
    check_schedule(schedule)?;
    if stop >= schedule.len() {
        return Err(Error::InvalidArgument(format!("step {stop} outside a {}-step schedule", schedule.len())));
    }
    let b = shape[0];
    let n: usize = shape.iter().product();
    let mut x = Tensor::new(shape.to_vec(), rng.normal_vec(n))?;
    for k in 0..stop {
        let t = vec![schedule[k]; b];
        let v = velocity(&x, &t)?;
        let x0 = x0_from_velocity(&x, &t, &v)?;
        let next = schedule[k + 1];
        let eps = Tensor::new(shape.to_vec(), rng.normal_vec(n))?;
        x = x0.zip_map(&eps, |a, e| (1.0 - next) * a + next * e)?;
    }
    Ok(x)
}

/// Few-step sampling: predict `x̂0` at each scheduled time and re-noise it
/// to the next time with fresh Gaussian noise.
pub fn few_step_sample(params: &ModelParams, cond: &[usize], schedule: &[f64], mask: &SkipMask, rng: &mut Rng) -> Result<Tensor> {
    let shape = [cond.len(), params.config.frames, params.config.token_dim];
    few_step_sample_with(|x, t| params.velocity(x, t, cond, mask), &shape, schedule, rng)
}

pub fn few_step_sample_with<F>(velocity: F, shape: &[usize], schedule: &[f64], rng: &mut Rng) -> Result<Tensor>
where
    F: Fn(&Tensor, &[f64]) -> Result<Tensor>,
{
    let last = schedule.len().saturating_sub(1);
    let x = few_step_prefix_with(&velocity, shape, schedule, last, rng)?;
    let t = vec![schedule[last]; shape[0]];
    let v = velocity(&x, &t)?;
    x0_from_velocity(&x, &t, &v)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::TimeSampling;
    use crate::gradcheck::grad_check;

    pub(crate) fn tiny_data() -> DataConfig {
        DataConfig {
            grid_h: 4,
            grid_w: 4,
            frames: 4,
            n_classes: 3,
            ..DataConfig::default()
        }
    }

    pub(crate) fn tiny_model(n_blocks: usize, seed: u64) -> ModelParams {
        let shape = ModelShape {
            n_blocks,
            hidden_dim: 8,
            time_embed_dim: 8,
            mlp_ratio: 2,
        };
        ModelParams::init(&DiTConfig::unchecked(&tiny_data(), &shape), seed)
    }

    fn probe(params: &ModelParams, batch: usize, seed: u64) -> (Tensor, Vec<f64>, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let c = &params.config;
        let x = noise_like(c, batch, &mut rng);
        let t = (0..batch).map(|_| rng.uniform(T_MIN, T_MAX)).collect();
        let cond = (0..batch).map(|_| rng.below(c.n_classes + 1)).collect();
        (x, t, cond)
    }

    #[test]
    fn all_skip_collapses_to_projections() {
        let p = tiny_model(4, 1);
        let (x, t, cond) = probe(&p, 3, 2);
        let v = p.velocity(&x, &t, &cond, &SkipMask::all(4)).unwrap();
        // g2(g1(x)) by hand
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let w1 = tape.constant(p.tensors[0].clone()).unwrap();
        let b1 = tape.constant(p.tensors[1].clone()).unwrap();
        let pos = tape.constant(p.tensors[2].clone()).unwrap();
        let h = tape.matmul(xv, w1).unwrap();
        let h = tape.add_bias(h, b1).unwrap();
        let h = tape.add_bias(h, pos).unwrap();
        let h = tape.layer_norm(h).unwrap();
        let n = p.tensors.len();
        let w2 = tape.constant(p.tensors[n - 2].clone()).unwrap();
        let b2 = tape.constant(p.tensors[n - 1].clone()).unwrap();
        let o = tape.matmul(h, w2).unwrap();
        let o = tape.add_bias(o, b2).unwrap();
        assert_eq!(&v, tape.value(o));
    }

    #[test]
    fn skipping_equals_zeroed_residual() {
        let p = tiny_model(4, 3);
        let (x, t, cond) = probe(&p, 2, 4);
        for i in 0..4 {
            let skipped = p.velocity(&x, &t, &cond, &SkipMask::only(4, i)).unwrap();
            let mut z = p.clone();
            z.zero_block_residual(i);
            let zeroed = z.velocity(&x, &t, &cond, &SkipMask::none(4)).unwrap();
            assert!(skipped.max_abs_diff(&zeroed) < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic_and_checks_mask() {
        let p = tiny_model(4, 5);
        let (x, t, cond) = probe(&p, 2, 6);
        let m = SkipMask::from_keep_set(4, &[0, 3]);
        assert_eq!(p.velocity(&x, &t, &cond, &m).unwrap(), p.velocity(&x, &t, &cond, &m).unwrap());
        assert!(p.velocity(&x, &t, &cond, &SkipMask::none(3)).is_err());
    }

    #[test]
    fn x0_predictor_identities() {
        let xt = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let v = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
        assert_eq!(x0_from_velocity(&xt, &[0.5], &v).unwrap().data(), &[1.0]);

        let mut rng = Rng::new(1);
        let x0 = Tensor::new(vec![2, 3], rng.normal_vec(6)).unwrap();
        let b = DiffusionBatch::from_data(x0.clone(), vec![0, 1], TimeSampling::Uniform, &mut rng).unwrap();
        let rec = x0_from_velocity(&b.xt, &b.t, &b.velocity_target()).unwrap();
        assert!(rec.max_abs_diff(&x0) < 1e-12);

        let small = x0_from_velocity(&b.xt, &[T_MIN, T_MIN], &b.velocity_target()).unwrap();
        assert!(small.max_abs_diff(&b.xt) <= T_MIN * b.velocity_target().max_abs() + 1e-15);
        assert!(x0_from_velocity(&xt, &[0.5], &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn fm_loss_examples() {
        let x0 = Tensor::zeros(vec![1, 2, 2]);
        let x1 = Tensor::ones(vec![1, 2, 2]);
        let b = DiffusionBatch::assemble(x0, x1, vec![0.3], vec![0]);
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(vec![1, 2, 2])).unwrap();
        let exact = tape.constant(b.velocity_target()).unwrap();
        let target = tape.constant(b.velocity_target()).unwrap();
        let l0 = tape.mse_loss(zero, target).unwrap();
        let l1 = tape.mse_loss(exact, target).unwrap();
        assert_eq!(tape.value(l0).item(), 1.0);
        assert_eq!(tape.value(l1).item(), 0.0);
    }

    #[test]
    fn fm_loss_gradient_check() {
        let (p, batch) = crate::gradcheck::reference_model();
        let cfg = p.config.clone();
        let mask = SkipMask::none(2);
        let report = grad_check(
            |tape, vars| fm_loss(tape, vars, &cfg, &batch, &mask, None).map_err(|e| match e {
                Error::Tensor(t) => t,
                other => panic!("{other}"),
            }),
            &p.tensors,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "max rel error {} at {:?}", report.max_rel_error, report.worst);
    }

    #[test]
    fn retention_accounting() {
        let p = tiny_model(4, 0);
        assert_eq!(p.retention_ratio(&SkipMask::none(4)), 1.0);
        let block: usize = p.block_param_count(0);
        let expected = (p.param_count() - 2 * block) as f64 / p.param_count() as f64;
        assert_eq!(p.retention_ratio(&SkipMask::from_keep_set(4, &[1, 2])), expected);
        let mut last = 1.0;
        for k in 0..=4 {
            let keep: Vec<usize> = (k..4).collect();
            let r = p.retention_ratio(&SkipMask::from_keep_set(4, &keep));
            assert!(r <= last);
            last = r;
        }
    }

    #[test]
    fn cfg_identities() {
        let p = tiny_model(4, 9);
        let (x, t, cond) = probe(&p, 2, 1);
        let cond: Vec<usize> = cond.iter().map(|c| c % p.config.n_classes).collect();
        let m = SkipMask::none(4);
        let vc = p.velocity(&x, &t, &cond, &m).unwrap();
        let vn = p.velocity(&x, &t, &[p.config.null_label(); 2], &m).unwrap();
        assert_eq!(cfg_velocity(&p, &x, &t, &cond, 1.0, &m).unwrap(), vc);
        assert_eq!(cfg_velocity(&p, &x, &t, &cond, 0.0, &m).unwrap(), vn);
        let w = 2.5;
        let g = cfg_velocity(&p, &x, &t, &cond, w, &m).unwrap();
        let manual = vn.zip_map(&vc, |n, c| n + w * (c - n)).unwrap();
        assert_eq!(g, manual);
    }

    #[test]
    fn euler_sampler_contract() {
        let p = tiny_model(4, 2);
        let m = SkipMask::none(4);
        let cond = [0, 2];
        let a = euler_sample(&p, &cond, 3, 1.0, &m, &mut Rng::new(5)).unwrap();
        let b = euler_sample(&p, &cond, 3, 1.0, &m, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        // K = 1 is one explicit Euler step from the initial noise.
        let mut rng = Rng::new(8);
        let one = euler_sample(&p, &cond, 1, 1.0, &m, &mut rng.clone()).unwrap();
        let x1 = noise_like(&p.config, 2, &mut rng);
        let v = p.velocity(&x1, &[T_MAX; 2], &cond, &m).unwrap();
        let manual = x1.zip_map(&v, |x, v| x - (T_MAX - T_MIN) * v).unwrap();
        assert_eq!(one, manual);
        assert!(euler_sample(&p, &cond, 0, 1.0, &m, &mut rng).is_err());
    }

    #[test]
    fn few_step_sampler_contract() {
        assert_eq!(default_schedule(4), vec![0.999, 0.75, 0.5, 0.25]);
        assert_eq!(default_schedule(1), vec![0.999]);
        let p = tiny_model(4, 2);
        let m = SkipMask::none(4);
        let s = default_schedule(4);
        let a = few_step_sample(&p, &[1], &s, &m, &mut Rng::new(3)).unwrap();
        let b = few_step_sample(&p, &[1], &s, &m, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        let mut rng = Rng::new(4);
        let one = few_step_sample(&p, &[1], &[0.999], &m, &mut rng.clone()).unwrap();
        let x = noise_like(&p.config, 1, &mut rng);
        let v = p.velocity(&x, &[0.999], &[1], &m).unwrap();
        assert_eq!(one, x0_from_velocity(&x, &[0.999], &v).unwrap());
        assert!(few_step_sample(&p, &[1], &[], &m, &mut rng).is_err());

        // An oracle velocity pointing from the known x0 reproduces it at any K.
        let x0 = Tensor::from_fn(vec![1, 4, 16], |i| (i as f64 * 0.3).sin());
        let oracle = |x: &Tensor, t: &[f64]| Ok(x.zip_map(&x0, |a, b| (a - b) / t[0])?);
        for k in 1..=5 {
            let out = few_step_sample_with(oracle, &[1, 4, 16], &default_schedule(k), &mut Rng::new(k as u64)).unwrap();
            assert!(out.max_abs_diff(&x0) < 1e-12);
        }
        assert!(few_step_sample(&p, &[1], &[0.5, 0.7], &m, &mut rng).is_err());
    }
}
