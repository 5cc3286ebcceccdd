//! Few-step pruned generator distilled by distribution matching.
//!
//! Three parameter sets are involved. The frozen teacher `Θ` scores the
//! target distribution through a guided blend of its pruned and unpruned
//! velocities:
//!
//! ```text
//! v_real = β1·(v_pr(c) − v_pr(∅)) + β2·(v_unpr(c) − v_pr(c)) + v_pr(∅)
//! ```
//!
//! with `β1`, `β2` jittered uniformly every generator step. A trainable
//! fake model tracks the generator's own output distribution with plain
//! flow matching. The generator `φ` runs the pruned mask on a `K`-step
//! schedule and moves its `x̂0` predictions along
//! `σ_t·(v_real − v_fake)`, the descent direction of the diffused KL
//! between generator and teacher distributions (`σ_t = t` for the linear
//! interpolant).
//!
//! The per-sample direction is injected through the surrogate
//! `½‖x̂0 − SG(x̂0 − λ·g)‖²`, whose gradient with respect to `x̂0` is
//! exactly `λ·g`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{DiffusionBatch, TimeSampling};
use crate::error::{Error, Result};
use crate::model::{default_schedule, few_step_prefix, fm_loss, forward, ModelParams, SkipMask};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{divergence, optimizer_step};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceParams {
    pub beta1: f64,
    pub beta2: f64,
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        Self {
            beta1: 2.0,
            beta2: 0.25,
            a1: 1.0,
            b1: 1.0,
            a2: 0.1,
            b2: 0.1,
        }
    }
}

impl GuidanceParams {
    /// Fixed scales with no jitter.
    pub fn exact(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            a1: 0.0,
            b1: 0.0,
            a2: 0.0,
            b2: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.a1, self.b1, self.a2, self.b2];
        if widths.iter().any(|w| !(*w >= 0.0)) || !self.beta1.is_finite() || !self.beta2.is_finite() {
            return Err(Error::Config(format!("guidance jitter widths must be non-negative and scales finite: {self:?}")));
        }
        Ok(())
    }

    /// Non-fatal configuration concerns.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.beta2 - self.a2 < 0.0 {
            out.push(format!(
                "beta2 − a2 = {} < 0: intra guidance can extrapolate past the pruned teacher",
                self.beta2 - self.a2
            ));
        }
        out
    }
}

/// `β1 ~ U[β1−a1, β1+b1]`, then `β2 ~ U[β2−a2, β2+b2]`.
pub fn sample_guidance_scales(gp: &GuidanceParams, rng: &mut Rng) -> (f64, f64) {
    let b1 = rng.uniform(gp.beta1 - gp.a1, gp.beta1 + gp.b1);
    let b2 = rng.uniform(gp.beta2 - gp.a2, gp.beta2 + gp.b2);
    (b1, b2)
}

/// Combines the three teacher velocities as
/// `(β1−β2)·v_pr(c) + (1−β1)·v_pr(∅) + β2·v_unpr(c)`, the same affine form
/// regrouped so the endpoints `β = (1, 0)` and `β = (1, 1)` reproduce
/// `v_pr(c)` and `v_unpr(c)` bit for bit.
pub fn blend_velocities(v_pr_c: &Tensor, v_pr_null: &Tensor, v_unpr_c: &Tensor, beta1: f64, beta2: f64) -> Result<Tensor> {
    let (wc, wn, wu) = (beta1 - beta2, 1.0 - beta1, beta2);
    let partial = v_pr_c.zip_map(v_pr_null, |c, n| wc * c + wn * n)?;
    Ok(partial.zip_map(v_unpr_c, |p, u| p + wu * u)?)
}

/// Guided teacher velocity; `mask` is the teacher's pruned configuration.
pub fn real_velocity(
    theta: &ModelParams,
    xt: &Tensor,
    t: &[f64],
    cond: &[usize],
    mask: &SkipMask,
    beta1: f64,
    beta2: f64,
) -> Result<Tensor> {
    let null = vec![theta.config.null_label(); cond.len()];
    let v_pr_c = theta.velocity(xt, t, cond, mask)?;
    let v_pr_null = theta.velocity(xt, t, &null, mask)?;
    let v_unpr_c = if mask.is_unpruned() {
        v_pr_c.clone()
    } else {
        theta.velocity(xt, t, cond, &SkipMask::none(theta.config.n_blocks))?
    };
    blend_velocities(&v_pr_c, &v_pr_null, &v_unpr_c, beta1, beta2)
}

/// Records `½‖x̂0 − SG(x̂0 − λ_b·g)‖²` with one `λ_b` per leading-axis sample.
pub fn surrogate_loss(tape: &mut Tape, x0_hat: Var, g: &Tensor, lambda: &[f64]) -> Result<Var> {
    let value = tape.value(x0_hat);
    if value.shape() != g.shape() {
        return Err(Error::InvalidArgument(format!("x̂0 {:?} vs g {:?}", value.shape(), g.shape())));
    }
    let per = g.numel() / lambda.len().max(1);
    let target_data = value
        .data()
        .iter()
        .zip(g.data())
        .enumerate()
        .map(|(i, (&x, &gi))| x - lambda[i / per] * gi)
        .collect();
    let target = tape.constant(Tensor::new(value.shape().to_vec(), target_data)?)?;
    surrogate_against(tape, x0_hat, target)
}

/// `½‖x − target‖²` for a constant `target`.
pub fn surrogate_against(tape: &mut Tape, x: Var, target: Var) -> Result<Var> {
    let d = tape.sub(x, target)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 0.5)?)
}

/// Which model configuration the real and fake scorers use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherBase {
    /// Teacher terms and the fake model run the pruned mask.
    Pruned,
    /// Teacher terms and the fake model run every block.
    Unpruned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub iterations: usize,
    /// Fake updates per generator update.
    pub fake_steps: usize,
    /// Generator sampling steps `K`.
    pub steps: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_fake: f64,
    /// Range of the diffusion time drawn for the score difference.
    pub t_min: f64,
    pub t_max: f64,
    pub lambda: f64,
    /// Scale each sample's `g` by `1/(mean|g| + 1e-8)`.
    pub normalize: bool,
    pub teacher_base: TeacherBase,
    pub guidance: GuidanceParams,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            iterations: 600,
            fake_steps: 5,
            steps: 4,
            batch_size: 8,
            lr_generator: 1e-4,
            lr_fake: 1e-3,
            t_min: 0.02,
            t_max: 0.98,
            lambda: 1.0,
            normalize: false,
            teacher_base: TeacherBase::Pruned,
            guidance: GuidanceParams::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("distillation needs steps ≥ 1 and batch_size ≥ 1".into()));
        }
        if !(self.lr_generator > 0.0) || !(self.lr_fake > 0.0) || !(self.lambda > 0.0) {
            return Err(Error::Config("distillation learning rates and lambda must be positive".into()));
        }
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(Error::Config(format!("need 0 < t_min < t_max < 1, got {} and {}", self.t_min, self.t_max)));
        }
        Ok(())
    }
}

/// Named random streams of a distillation run.
#[derive(Debug, Clone)]
pub struct DistillRngs {
    pub noise: Rng,
    pub guidance: Rng,
    pub time: Rng,
    pub labels: Rng,
}

impl DistillRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            noise: Rng::stream(seed, "noise"),
            guidance: Rng::stream(seed, "guidance"),
            time: Rng::stream(seed, "time"),
            labels: Rng::stream(seed, "labels"),
        }
    }
}

/// Diagnostics of one generator update.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorStepInfo {
    pub loss: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mean_t: f64,
    /// Schedule index whose prediction was trained.
    pub step_index: usize,
}

pub struct DistillState {
    pub generator: ModelParams,
    pub fake: ModelParams,
    theta: ModelParams,
    theta_checksum: String,
    /// The generator's deterministic pruned mask.
    pub pruned: SkipMask,
    pub schedule: Vec<f64>,
    pub config: DistillConfig,
    gen_opt: AdamW,
    fake_opt: AdamW,
}

impl DistillState {
    /// Generator and fake model both start as copies of `theta`.
    pub fn new(theta: ModelParams, pruned: SkipMask, config: DistillConfig) -> Result<Self> {
        config.validate()?;
        if pruned.len() != theta.config.n_blocks {
            return Err(Error::InvalidArgument(format!(
                "pruned mask has {} entries for {} blocks",
                pruned.len(),
                theta.config.n_blocks
            )));
        }
        let adam = |lr| AdamWConfig {
            lr,
            ..AdamWConfig::default()
        };
        Ok(Self {
            gen_opt: AdamW::new(adam(config.lr_generator), &theta.tensors),
            fake_opt: AdamW::new(adam(config.lr_fake), &theta.tensors),
            generator: theta.clone(),
            fake: theta.clone(),
            theta_checksum: theta.checksum(),
            theta,
            pruned,
            schedule: default_schedule(config.steps),
            config,
        })
    }

    /// The frozen teacher.
    pub fn theta(&self) -> &ModelParams {
        &self.theta
    }

    /// Mask used by the teacher's "pruned" terms and by the fake model.
    pub fn teacher_mask(&self) -> SkipMask {
        match self.config.teacher_base {
            TeacherBase::Pruned => self.pruned.clone(),
            TeacherBase::Unpruned => SkipMask::none(self.pruned.len()),
        }
    }

    /// Errors if the teacher no longer matches its initial checksum.
    pub fn verify_teacher(&self) -> Result<()> {
        if self.theta.checksum() != self.theta_checksum {
            return Err(Error::Precondition("frozen teacher parameters changed during distillation".into()));
        }
        Ok(())
    }

    fn draw_labels(&self, rng: &mut Rng) -> Vec<usize> {
        (0..self.config.batch_size).map(|_| rng.below(self.theta.config.n_classes)).collect()
    }

    /// Generator input at a random schedule index, without gradient.
    fn generator_input(&self, labels: &[usize], rngs: &mut DistillRngs) -> Result<(Tensor, usize)> {
        let k = rngs.labels.below(self.schedule.len());
        let x = few_step_prefix(&self.generator, labels, &self.schedule, &self.pruned, k, &mut rngs.noise)?;
        Ok((x, k))
    }

    /// One generator update against the guided teacher and the current fake model.
    pub fn generator_step(&mut self, rngs: &mut DistillRngs) -> Result<GeneratorStepInfo> {
        let (beta1, beta2) = sample_guidance_scales(&self.config.guidance, &mut rngs.guidance);
        let theta = &self.theta;
        let fake = &self.fake;
        let tmask = self.teacher_mask();
        let real = |x: &Tensor, t: &[f64], c: &[usize]| real_velocity(theta, x, t, c, &tmask, beta1, beta2);
        let fake_v = |x: &Tensor, t: &[f64], c: &[usize]| fake.velocity(x, t, c, &tmask);
        let labels = self.draw_labels(&mut rngs.labels);
        let (x, k) = self.generator_input(&labels, rngs)?;
        let (loss, mean_t) = generator_update(
            &mut self.generator,
            &mut self.gen_opt,
            &self.pruned,
            &x,
            self.schedule[k],
            &labels,
            &real,
            &fake_v,
            &self.config,
            rngs,
        )?;
        Ok(GeneratorStepInfo {
            loss,
            beta1,
            beta2,
            mean_t,
            step_index: k,
        })
    }

    /// One flow-matching update of the fake model on fresh generator
    /// outputs. Returns the loss and the mean diffusion time.
    pub fn fake_step(&mut self, rngs: &mut DistillRngs) -> Result<(f64, f64)> {
        let labels = self.draw_labels(&mut rngs.labels);
        let (x, k) = self.generator_input(&labels, rngs)?;
        let t = vec![self.schedule[k]; labels.len()];
        let v = self.generator.velocity(&x, &t, &labels, &self.pruned)?;
        let x0_hat = crate::model::x0_from_velocity(&x, &t, &v)?;
        let batch = DiffusionBatch::from_data(x0_hat, labels, TimeSampling::Uniform, &mut rngs.time)?;
        let mean_t = batch.t.iter().sum::<f64>() / batch.len() as f64;
        let tmask = self.teacher_mask();
        let cfg = self.fake.config.clone();
        let (loss, ()) = optimizer_step(&mut self.fake, &mut self.fake_opt, |tape, vars| {
            Ok((fm_loss(tape, vars, &cfg, &batch, &tmask, None)?, ()))
        })?;
        Ok((loss, mean_t))
    }
}

/// Velocity of a scorer at `(x, t, c)`.
pub type Scorer<'a> = &'a dyn Fn(&Tensor, &[f64], &[usize]) -> Result<Tensor>;

/// Core of the generator update with arbitrary real and fake scorers.
///
/// `x` is the generator input at time `t_gen`. The prediction
/// `x̂0 = x − t_gen·v_φ(x)` is diffused to `x_t = (1−t)·x̂0 + t·ε′` with
/// `t ~ U[t_min, t_max]` per sample, and `g = t·(v_real − v_fake)` at
/// `x_t` is pushed into `φ` through the surrogate loss. Returns the
/// surrogate value and the mean `t`.
#[allow(clippy::too_many_arguments)]
pub fn generator_update(
    generator: &mut ModelParams,
    opt: &mut AdamW,
    mask: &SkipMask,
    x: &Tensor,
    t_gen: f64,
    labels: &[usize],
    real: Scorer,
    fake: Scorer,
    config: &DistillConfig,
    rngs: &mut DistillRngs,
) -> Result<(f64, f64)> {
    let b = labels.len();
    let per = x.numel() / b;
    let t: Vec<f64> = (0..b).map(|_| rngs.time.uniform(config.t_min, config.t_max)).collect();
    let eps = rngs.noise.normal_vec(x.numel());
    let cfg = generator.config.clone();
    let gen_t = vec![t_gen; b];
    let (loss, ()) = optimizer_step(generator, opt, |tape, vars| {
        let xv = tape.constant(x.clone())?;
        let v = forward(tape, vars, &cfg, xv, &gen_t, labels, mask)?;
        let tv = tape.scale(v, t_gen)?;
        let x0_hat = tape.sub(xv, tv)?;

        let x0 = tape.value(x0_hat);
        let xt_data = x0
            .data()
            .iter()
            .zip(&eps)
            .enumerate()
            .map(|(i, (&a, &e))| (1.0 - t[i / per]) * a + t[i / per] * e)
            .collect();
        let xt = Tensor::new(x0.shape().to_vec(), xt_data)?;
        let v_real = real(&xt, &t, labels)?;
        let v_fake = fake(&xt, &t, labels)?;
        let diff = v_real.zip_map(&v_fake, |r, f| r - f)?;
        let g = Tensor::new(
            diff.shape().to_vec(),
            diff.data().iter().enumerate().map(|(i, &d)| t[i / per] * d).collect(),
        )?;
        if !g.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite score difference at t = {t:?} (max |v_real| {}, max |v_fake| {})",
                v_real.max_abs(),
                v_fake.max_abs()
            )));
        }
        let lambda: Vec<f64> = (0..b)
            .map(|s| {
                if config.normalize {
                    let m = g.data()[s * per..(s + 1) * per].iter().map(|v| v.abs()).sum::<f64>() / per as f64;
                    config.lambda / (m + 1e-8)
                } else {
                    config.lambda
                }
            })
            .collect();
        Ok((surrogate_loss(tape, x0_hat, &g, &lambda)?, ()))
    })?;
    Ok((loss, t.iter().sum::<f64>() / b as f64))
}

/// One row of the distillation trace; guidance scales are `None` for fake updates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistillRow {
    pub iteration: usize,
    pub phase: &'static str,
    pub loss: f64,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub t: f64,
}

/// CSV `iteration,phase,loss,beta1_cur,beta2_cur,t`.
pub fn distill_trace_csv(rows: &[DistillRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("iteration,phase,loss,beta1_cur,beta2_cur,t\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.iteration, r.phase, r.loss, opt(r.beta1), opt(r.beta2), r.t));
    }
    out
}

/// `iterations` rounds of `fake_steps` fake updates followed by one
/// generator update. The teacher checksum is verified on exit.
pub fn distill_loop(state: &mut DistillState, iterations: usize, seed: u64) -> Result<Vec<DistillRow>> {
    let mut rngs = DistillRngs::new(seed);
    let mut rows = Vec::with_capacity(iterations * (state.config.fake_steps + 1));
    for it in 0..iterations {
        for _ in 0..state.config.fake_steps {
            let (loss, t) = state.fake_step(&mut rngs).map_err(|e| divergence("fake", it, e))?;
            rows.push(DistillRow {
                iteration: it,
                phase: "fake",
                loss,
                beta1: None,
                beta2: None,
                t,
            });
        }
        let info = state.generator_step(&mut rngs).map_err(|e| divergence("generator", it, e))?;
        rows.push(DistillRow {
            iteration: it,
            phase: "gen",
            loss: info.loss,
            beta1: Some(info.beta1),
            beta2: Some(info.beta2),
            t: info.mean_t,
        });
    }
    state.verify_teacher()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{analytic_gradient, numeric_gradient};
    use crate::model::tests::tiny_model;
    use crate::train::head_tail_means;

    fn state(n_blocks: usize, config: DistillConfig) -> DistillState {
        let theta = tiny_model(n_blocks, 4);
        DistillState::new(theta, SkipMask::from_keep_set(n_blocks, &[0, n_blocks - 1]), config).unwrap()
    }

    #[test]
    fn guidance_sampling() {
        let mut rng = Rng::new(0);
        assert_eq!(sample_guidance_scales(&GuidanceParams::exact(2.0, 0.25), &mut rng), (2.0, 0.25));
        let gp = GuidanceParams::default();
        let draws: Vec<(f64, f64)> = (0..10_000).map(|_| sample_guidance_scales(&gp, &mut rng)).collect();
        assert!(draws.iter().all(|&(b1, b2)| (1.0..=3.0).contains(&b1) && (0.15..=0.35).contains(&b2)));
        let mean = draws.iter().map(|d| d.0).sum::<f64>() / draws.len() as f64;
        assert!((mean - 2.0).abs() < 0.05);
        let mut a = Rng::stream(3, "guidance");
        let mut b = Rng::stream(3, "guidance");
        for _ in 0..10 {
            assert_eq!(sample_guidance_scales(&gp, &mut a), sample_guidance_scales(&gp, &mut b));
        }
        assert!(GuidanceParams { a2: 0.5, ..gp.clone() }.warnings().len() == 1);
        assert!(GuidanceParams { a1: -1.0, ..gp }.validate().is_err());
    }

    #[test]
    fn blend_scalar_probe() {
        let s = |v| Tensor::scalar(v);
        let out = blend_velocities(&s(2.0), &s(1.0), &s(4.0), 2.0, 0.25).unwrap();
        assert_eq!(out.item(), 3.5);
    }

    #[test]
    fn surrogate_gradient_is_lambda_g() {
        let x = Tensor::new(vec![2, 2], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let g = Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.25, 3.0]).unwrap();
        let lambda = [0.5, 2.0];
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone()).unwrap();
        let l = surrogate_loss(&mut tape, xv, &g, &lambda).unwrap();
        tape.backward(l).unwrap();
        let grad = tape.grad(xv).unwrap();
        let expected = [0.5, -0.5, 0.5, 6.0];
        for (a, e) in grad.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-10);
        }
        // finite differences with the stop-gradient target held fixed; the
        // loss is quadratic, so a wide step is free of truncation error
        let target = Tensor::new(vec![2, 2], vec![0.3 - 0.5, -1.2 + 0.5, 2.0 - 0.5, 0.7 - 6.0]).unwrap();
        let f = |tape: &mut Tape, p: &[Var]| {
            let c = tape.constant(target.clone())?;
            surrogate_against(tape, p[0], c).map_err(|e| match e {
                Error::Tensor(t) => t,
                other => panic!("{other}"),
            })
        };
        let (_, analytic) = analytic_gradient(&f, std::slice::from_ref(&x)).unwrap();
        let numeric = numeric_gradient(f, &[x], 0.5).unwrap();
        assert!(analytic[0].max_abs_diff(&numeric[0]) < 1e-10);
    }

    #[test]
    fn descent_probe() {
        // t = 0.5 and v_fake − v_real = [2, −2] give g = t·(v_real − v_fake) = [−1, 1]
        let (v_fake, v_real) = ([3.0, -1.0], [1.0, 1.0]);
        let g: Vec<f64> = v_real.iter().zip(&v_fake).map(|(r, f)| 0.5 * (r - f)).collect();
        assert_eq!(g, vec![-1.0, 1.0]);
    }

    #[test]
    fn matched_scorers_leave_generator_unchanged() {
        let mut s = state(4, DistillConfig::default());
        let before = s.generator.clone();
        let mut rngs = DistillRngs::new(1);
        let theta = s.theta.clone();
        let mask = s.pruned.clone();
        let oracle = |x: &Tensor, t: &[f64], c: &[usize]| real_velocity(&theta, x, t, c, &mask, 2.0, 0.25);
        let labels = vec![0, 1];
        let x = few_step_prefix(&s.generator, &labels, &s.schedule, &s.pruned, 1, &mut rngs.noise).unwrap();
        let (loss, _) = generator_update(
            &mut s.generator,
            &mut s.gen_opt,
            &mask,
            &x,
            s.schedule[1],
            &labels,
            &oracle,
            &oracle,
            &s.config,
            &mut rngs,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(s.generator, before);
    }

    #[test]
    fn fake_step_isolation_and_progress() {
        let mut s = state(4, DistillConfig::default());
        let gen_before = s.generator.checksum();
        let mut rngs = DistillRngs::new(2);
        let losses: Vec<f64> = (0..200).map(|_| s.fake_step(&mut rngs).unwrap().0).collect();
        assert_eq!(s.generator.checksum(), gen_before);
        let (head, tail) = head_tail_means(&losses, 20);
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn loop_is_deterministic_and_keeps_teacher() {
        let cfg = DistillConfig {
            fake_steps: 2,
            batch_size: 3,
            ..DistillConfig::default()
        };
        let mut a = state(4, cfg.clone());
        let mut b = state(4, cfg);
        let theta = a.theta.checksum();
        let ra = distill_loop(&mut a, 5, 9).unwrap();
        let rb = distill_loop(&mut b, 5, 9).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra.len(), 15);
        assert_eq!(a.generator, b.generator);
        assert_eq!(a.theta.checksum(), theta);
        let before = a.generator.clone();
        assert!(distill_loop(&mut a, 0, 1).unwrap().is_empty());
        assert_eq!(a.generator, before);
        assert!(distill_trace_csv(&ra).starts_with("iteration,phase,loss,beta1_cur,beta2_cur,t\n0,fake,"));
    }
}
