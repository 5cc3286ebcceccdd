//! Central finite-difference validation of tape gradients.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::data::{generate_dataset, make_batch, DataConfig, DiffusionBatch, TimeSampling};
use crate::model::{DiTConfig, ModelParams, ModelShape};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

/// Step size of the five-point stencil used by the validation suite.
pub const SUITE_STEP: f64 = 1e-3;
/// Relative-error tolerance of the validation suite.
pub const SUITE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// `(tensor index, element index, analytic, numeric)` at the worst relative error.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tol: f64,
    pub pass: bool,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Value and tape gradients of `f` at `params`.
pub fn analytic_gradient<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>), TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let value = tape.value(out).item();
    let grads = vars
        .iter()
        .map(|&v| tape.take_grad(v).expect("leaf gradients are populated by backward"))
        .collect();
    Ok((value, grads))
}

/// Central differences `(f(x+h) − f(x−h)) / 2h`, one coordinate at a time.
pub fn numeric_gradient<F>(f: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    if h <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "numeric_gradient",
            msg: format!("step size must be positive, got {h}"),
        });
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].shape().to_vec());
        for j in 0..params[pi].numel() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[j] = orig - h;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Five-point central stencil `(8[f(x+h) − f(x−h)] − [f(x+2h) − f(x−2h)]) / 12h`.
///
/// Its truncation error is O(h⁴), so a step of 1e-3 is accurate while
/// keeping cancellation error far below what the two-point rule needs.
pub fn numeric_gradient_5pt<F>(f: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let near = numeric_gradient(&f, params, h)?;
    let far = numeric_gradient(&f, params, 2.0 * h)?;
    near.iter().zip(&far).map(|(n, w)| n.zip_map(w, |a, b| (4.0 * a - b) / 3.0)).collect()
}

/// Relative error per element uses the denominator `max(|a|, |n|, 1e-12)`.
pub fn compare_gradients(analytic: &[Tensor], numeric: &[Tensor], tol: f64) -> GradCheckReport {
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut checked = 0;
    let mut worst = None;
    for (ti, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (ei, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let abs = (x - y).abs();
            let denom = x.abs().max(y.abs()).max(1e-12);
            if abs / denom > max_rel || worst.is_none() {
                worst = Some((ti, ei, x, y));
            }
            max_rel = max_rel.max(abs / denom);
            max_abs = max_abs.max(abs);
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        checked,
        worst,
        tol,
        pass: max_rel < tol,
    }
}

/// Compares tape gradients of `f` against central differences with step `h`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let (_, analytic) = analytic_gradient(&f, params)?;
    let numeric = numeric_gradient(&f, params, h)?;
    Ok(compare_gradients(&analytic, &numeric, tol))
}

/// A 4×4-grid, 4-frame, 3-class dataset layout for the validation suite.
pub fn reference_data() -> DataConfig {
    DataConfig {
        grid_h: 4,
        grid_w: 4,
        frames: 4,
        n_classes: 3,
        ..DataConfig::default()
    }
}

/// The 2-block, hidden-8 model and a batch of two noised samples used by
/// the gradient validation suite.
///
/// Query and key weights are doubled relative to the default
/// initialization. At default scale the attention is nearly uniform and
/// some query/key gradient entries fall to 1e-7..1e-9, where central
/// differences are dominated by floating-point cancellation rather than
/// by any defect of the tape; the sharper attention keeps every entry in
/// a range finite differences can resolve.
pub fn reference_model() -> (ModelParams, DiffusionBatch) {
    let shape = ModelShape {
        n_blocks: 2,
        hidden_dim: 8,
        time_embed_dim: 8,
        mlp_ratio: 2,
    };
    let data = reference_data();
    let config = DiTConfig::unchecked(&data, &shape);
    let mut params = ModelParams::init(&config, 1);
    for (i, (name, _)) in config.layout().iter().enumerate() {
        if name.ends_with("attn/Wq") || name.ends_with("attn/Wk") {
            params.tensors[i] = params.tensors[i].map(|v| 2.0 * v);
        }
    }
    let samples = generate_dataset(&data, 4, 1).expect("reference data config is valid");
    let batch = make_batch(&samples, 2, TimeSampling::Uniform, &mut Rng::new(1)).expect("4 samples cover a batch of 2");
    (params, batch)
}

fn tensor_err(e: crate::error::Error) -> TensorError {
    match e {
        crate::error::Error::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "gradcheck",
            msg: other.to_string(),
        },
    }
}

/// One named entry of [`run_suite`].
#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

/// Checks the flow-matching loss, the Stage-II total loss at α ∈ {0, 0.5, 1}
/// and the generator surrogate on [`reference_model`].
///
/// The Stage-II analytic gradients come from the stop-gradient tape; the
/// numeric side holds the distillation target at its value at the
/// reference point, which is what stop-gradient means.
pub fn run_suite() -> Result<Vec<SuiteEntry>, TensorError> {
    use crate::codistill::surrogate_loss;
    use crate::model::{fm_loss, forward, SkipMask};
    use crate::prune_train::stage2_losses_with_target;

    let (params, batch) = reference_model();
    let cfg = params.config.clone();
    let full = SkipMask::none(cfg.n_blocks);
    let pruned = SkipMask::from_keep_set(cfg.n_blocks, &[0]);
    let mut out = Vec::new();
    let mut push = |name: String, report| out.push(SuiteEntry { name, report });

    let fm = |tape: &mut Tape, vars: &[Var]| fm_loss(tape, vars, &cfg, &batch, &full, None).map_err(tensor_err);
    let (_, analytic) = analytic_gradient(&fm, &params.tensors)?;
    let numeric = numeric_gradient_5pt(fm, &params.tensors, SUITE_STEP)?;
    push("fm_loss".into(), compare_gradients(&analytic, &numeric, SUITE_TOL));

    let v_unpr = params.velocity(&batch.xt, &batch.t, &batch.labels, &full).map_err(tensor_err)?;
    for alpha in [0.0, 0.5, 1.0] {
        let (_, analytic) = analytic_gradient(
            &|tape: &mut Tape, vars: &[Var]| {
                stage2_losses_with_target(tape, vars, &cfg, &batch, &pruned, alpha, None)
                    .map(|l| l.total)
                    .map_err(tensor_err)
            },
            &params.tensors,
        )?;
        let numeric = numeric_gradient_5pt(
            |tape, vars| {
                stage2_losses_with_target(tape, vars, &cfg, &batch, &pruned, alpha, Some(&v_unpr))
                    .map(|l| l.total)
                    .map_err(tensor_err)
            },
            &params.tensors,
            SUITE_STEP,
        )?;
        push(format!("stage2_total(alpha={alpha})"), compare_gradients(&analytic, &numeric, SUITE_TOL));
    }

    // Generator surrogate at a fixed descent direction; its target is frozen
    // at the reference point the same way.
    let g = batch.xt.map(|v| 0.3 * v.sin());
    let lambda = vec![1.0; batch.t.len()];
    let t_gen = 0.6;
    let gen_t = vec![t_gen; batch.t.len()];
    let x0_hat = |tape: &mut Tape, vars: &[Var]| -> Result<Var, TensorError> {
        let xt = tape.constant(batch.xt.clone())?;
        let v = forward(tape, vars, &cfg, xt, &gen_t, &batch.labels, &pruned).map_err(tensor_err)?;
        let tv = tape.scale(v, t_gen)?;
        tape.sub(xt, tv)
    };
    let reference = {
        let mut tape = Tape::new();
        let vars = params.tensors.iter().map(|p| tape.constant(p.clone())).collect::<Result<Vec<_>, _>>()?;
        let x = x0_hat(&mut tape, &vars)?;
        tape.value(x).zip_map(&g, |a, b| a - b)?
    };
    let (_, analytic) = analytic_gradient(
        &|tape: &mut Tape, vars: &[Var]| {
            let x = x0_hat(tape, vars)?;
            surrogate_loss(tape, x, &g, &lambda).map_err(tensor_err)
        },
        &params.tensors,
    )?;
    let numeric = numeric_gradient_5pt(
        |tape, vars| {
            let x = x0_hat(tape, vars)?;
            let c = tape.constant(reference.clone())?;
            crate::codistill::surrogate_against(tape, x, c).map_err(tensor_err)
        },
        &params.tensors,
        SUITE_STEP,
    )?;
    push("surrogate".into(), compare_gradients(&analytic, &numeric, SUITE_TOL));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for entry in run_suite().unwrap() {
            assert!(entry.report.pass, "{}: {} at {:?}", entry.name, entry.report.max_rel_error, entry.report.worst);
        }
    }

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::new(vec![1], vec![0.7]).unwrap();
        let report = grad_check(|t, p| { let s = t.scale(p[0], 3.0)?; t.sum(s) }, &[w], 1e-5, 1e-9).unwrap();
        assert!(report.pass);
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn cubic_at_two() {
        let w = Tensor::new(vec![1], vec![2.0]).unwrap();
        let cube = |t: &mut Tape, p: &[Var]| {
            let sq = t.mul(p[0], p[0])?;
            let c = t.mul(sq, p[0])?;
            t.sum(c)
        };
        let (value, analytic) = analytic_gradient(&cube, std::slice::from_ref(&w)).unwrap();
        assert_eq!(value, 8.0);
        assert_eq!(analytic[0].data(), &[12.0]);
        let report = grad_check(cube, &[w], 1e-5, 1e-8).unwrap();
        assert!(report.pass, "{}", report.max_rel_error);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let w = Tensor::new(vec![2], vec![2.0, -1.0]).unwrap();
        let f = |t: &mut Tape, p: &[Var]| {
            let sq = t.mul(p[0], p[0])?;
            t.sum(sq)
        };
        let (_, analytic) = analytic_gradient(&f, std::slice::from_ref(&w)).unwrap();
        let doubled: Vec<Tensor> = analytic.iter().map(|g| g.map(|v| 2.0 * v)).collect();
        let numeric = numeric_gradient(f, &[w], 1e-5).unwrap();
        assert!(!compare_gradients(&doubled, &numeric, 1e-6).pass);
        assert!(compare_gradients(&analytic, &numeric, 1e-6).pass);
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let w = Tensor::ones(vec![2]);
        assert!(matches!(
            grad_check(|t, p| t.scale(p[0], 2.0), &[w], 1e-5, 1e-6),
            Err(TensorError::NonScalarLoss(_))
        ));
    }
}
