//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value computed during one forward pass. Operations
//! append nodes in execution order, so the node list is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! Each tape supports exactly one backward pass.
//!
//! Shapes follow a small set of rules instead of general broadcasting:
//! elementwise ops need equal shapes or a single-element operand, and the
//! explicit `add_bias`/`add_rows`/`mul_rows` ops cover the per-feature and
//! per-sample modulation used by the transformer.

use crate::tensor::{Tensor, TensorError};

/// Floor applied to the row standard deviation in `layer_norm`.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    AddRows(Var, Var),
    MulRows(Var, Var),
    Silu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    Mse { pred: Var, target: Var, weights: Option<Vec<f64>> },
    Sum(Var),
    Mean(Var),
    Concat(Var, Var),
    SliceLast { x: Var, start: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

type R = Result<Var, TensorError>;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

// out[m,n] += a[m,k] * b[k,n]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m,n] += a[m,k] * b[n,k]^T
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

// out[m,n] += a[r,m]^T * b[r,n]
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], r: usize, m: usize, n: usize) {
    for p in 0..r {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> R {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> R {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> R {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Stop-gradient: a constant holding the current value of `v`.
    pub fn detach(&mut self, v: Var) -> R {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass. `None` before backward or for
    /// nodes that do not require gradients.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    /// `a[..., k] · b[k, n]`, leading axes of `a` treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> R {
        let (av, bv) = (self.value(a), self.value(b));
        let k = last_dim(av);
        if bv.rank() != 2 || av.rank() < 1 || bv.shape()[0] != k {
            return Err(mismatch("matmul", av, bv));
        }
        let n = bv.shape()[1];
        let rows = av.numel() / k.max(1);
        let mut out = vec![0.0; rows * n];
        gemm_nn(av.data(), bv.data(), &mut out, rows, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> R {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(mismatch("bmm", av, bv));
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            return Err(mismatch("bmm", av, bv));
        }
        let mut out = vec![0.0; batch * m * n];
        for s in 0..batch {
            let ad = &av.data()[s * m * k..(s + 1) * m * k];
            let bd = &bv.data()[s * k * n..(s + 1) * k * n];
            let od = &mut out[s * m * n..(s + 1) * m * n];
            if trans_b {
                gemm_nt(ad, bd, od, m, k, n);
            } else {
                gemm_nn(ad, bd, od, m, k, n);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::Bmm { a, b, trans_b },
            rg,
            "bmm",
        )
    }

    /// Batched `a[B,m,k] · b[B,k,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> R {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a[B,m,k] · b[B,n,k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> R {
        self.bmm_impl(a, b, true)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            av.zip_map(bv, f)
        } else if bv.numel() == 1 {
            let s = bv.data()[0];
            Ok(av.map(|x| f(x, s)))
        } else if av.numel() == 1 {
            let s = av.data()[0];
            Ok(bv.map(|y| f(s, y)))
        } else {
            Err(mismatch(name, av, bv))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> R {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> R {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> R {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> R {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> R {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg, "add_scalar")
    }

    /// Adds `b` to every trailing block of `a`; `b.shape` must be a suffix of `a.shape`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> R {
        let (av, bv) = (self.value(a), self.value(b));
        let (ar, br) = (av.rank(), bv.rank());
        if br == 0 || br > ar || av.shape()[ar - br..] != *bv.shape() {
            return Err(mismatch("add_bias", av, bv));
        }
        let bn = bv.numel();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_mut(bn) {
            for (o, &x) in chunk.iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddBias(a, b), rg, "add_bias")
    }

    fn rows_check(&self, a: Var, r: Var, name: &'static str) -> Result<(usize, usize, usize), TensorError> {
        let (av, rv) = (self.value(a), self.value(r));
        if av.rank() < 2 || rv.rank() != 2 || av.shape()[0] != rv.shape()[0] || last_dim(av) != rv.shape()[1] {
            return Err(mismatch(name, av, rv));
        }
        let batch = av.shape()[0];
        let n = rv.shape()[1];
        let rows = av.numel() / (batch * n).max(1);
        Ok((batch, rows, n))
    }

    /// `a[B, .., n] + r[B, n]`, repeating each sample's row over the middle axes.
    pub fn add_rows(&mut self, a: Var, r: Var) -> R {
        let (batch, rows, n) = self.rows_check(a, r, "add_rows")?;
        let (av, rv) = (self.value(a), self.value(r));
        let mut out = av.data().to_vec();
        for s in 0..batch {
            let rrow = &rv.data()[s * n..(s + 1) * n];
            for chunk in out[s * rows * n..(s + 1) * rows * n].chunks_mut(n) {
                for (o, &x) in chunk.iter_mut().zip(rrow) {
                    *o += x;
                }
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(r);
        self.push(out, Op::AddRows(a, r), rg, "add_rows")
    }

    /// `a[B, .., n] * r[B, n]`, repeating each sample's row over the middle axes.
    pub fn mul_rows(&mut self, a: Var, r: Var) -> R {
        let (batch, rows, n) = self.rows_check(a, r, "mul_rows")?;
        let (av, rv) = (self.value(a), self.value(r));
        let mut out = av.data().to_vec();
        for s in 0..batch {
            let rrow = &rv.data()[s * n..(s + 1) * n];
            for chunk in out[s * rows * n..(s + 1) * rows * n].chunks_mut(n) {
                for (o, &x) in chunk.iter_mut().zip(rrow) {
                    *o *= x;
                }
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(r);
        self.push(out, Op::MulRows(a, r), rg, "mul_rows")
    }

    pub fn silu(&mut self, a: Var) -> R {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg, "silu")
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    /// The standard deviation is floored at [`LAYER_NORM_EPS`], so a
    /// constant row maps to zeros.
    pub fn layer_norm(&mut self, x: Var) -> R {
        let xv = self.value(x);
        let n = last_dim(xv);
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.numel() / n.max(1));
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / var.sqrt().max(LAYER_NORM_EPS);
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(out, Op::LayerNorm { x, inv_std }, rg, "layer_norm")
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> R {
        let av = self.value(a);
        let n = last_dim(av);
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg, "softmax")
    }

    /// Mean squared error. The target must not require gradients.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> R {
        self.mse_impl(pred, target, None)
    }

    /// Mean squared error with one weight per leading-axis slice:
    /// `(1/G) Σ_g w_g · mean_g (pred − target)²`.
    pub fn weighted_mse_loss(&mut self, pred: Var, target: Var, weights: Vec<f64>) -> R {
        self.mse_impl(pred, target, Some(weights))
    }

    fn mse_impl(&mut self, pred: Var, target: Var, weights: Option<Vec<f64>>) -> R {
        if self.rg(target) {
            return Err(TensorError::TargetRequiresGrad);
        }
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() {
            return Err(mismatch("mse_loss", pv, tv));
        }
        let count = pv.numel();
        if count == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mse_loss",
                msg: "empty input".into(),
            });
        }
        let loss = match &weights {
            None => pv.data().iter().zip(tv.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / count as f64,
            Some(w) => {
                let groups = pv.shape().first().copied().unwrap_or(1);
                if w.len() != groups {
                    return Err(TensorError::InvalidArgument {
                        op: "weighted_mse_loss",
                        msg: format!("{} weights for {} groups", w.len(), groups),
                    });
                }
                let per = count / groups;
                let mut total = 0.0;
                for (g, wg) in w.iter().enumerate() {
                    let s: f64 = pv.data()[g * per..(g + 1) * per]
                        .iter()
                        .zip(&tv.data()[g * per..(g + 1) * per])
                        .map(|(p, t)| (p - t) * (p - t))
                        .sum();
                    total += wg * s;
                }
                total / count as f64
            }
        };
        let rg = self.rg(pred);
        self.push(Tensor::scalar(loss), Op::Mse { pred, target, weights }, rg, "mse_loss")
    }

    pub fn sum(&mut self, a: Var) -> R {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> R {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.numel().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// Concatenation along the last (feature) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> R {
        let (av, bv) = (self.value(a), self.value(b));
        let (ar, br) = (av.rank(), bv.rank());
        if ar == 0 || ar != br || av.shape()[..ar - 1] != bv.shape()[..br - 1] {
            return Err(mismatch("concat", av, bv));
        }
        let (na, nb) = (last_dim(av), last_dim(bv));
        let mut out = Vec::with_capacity(av.numel() + bv.numel());
        for (ra, rb) in av.data().chunks(na).zip(bv.data().chunks(nb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = av.shape().to_vec();
        shape[ar - 1] = na + nb;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out)?, Op::Concat(a, b), rg, "concat")
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> R {
        let xv = self.value(x);
        let n = last_dim(xv);
        if xv.rank() == 0 || start + len > n {
            return Err(TensorError::InvalidArgument {
                op: "slice_last",
                msg: format!("range {start}..{} exceeds width {n}", start + len),
            });
        }
        let out: Vec<f64> = xv.data().chunks(n).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::SliceLast { x, start }, rg, "slice_last")
    }

    /// Row lookup `table[idx[j], :]` for each j.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> R {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("table must be 2-D, got {:?}", tv.shape()),
            });
        }
        let (rows, n) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::InvalidArgument {
                    op: "gather_rows",
                    msg: format!("row {i} out of range for {rows} rows"),
                });
            }
            out.extend_from_slice(&tv.data()[i * n..(i + 1) * n]);
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(vec![idx.len(), n], out)?,
            Op::GatherRows { table, idx: idx.to_vec() },
            rg,
            "gather_rows",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> R {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every node that
    /// requires gradients holds one (zeros when unreachable). Gradients
    /// from multiple consumers are summed.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                let shape = node.value.shape().to_vec();
                node.grad = Some(match g {
                    Some(data) => Tensor::new(shape, data)?,
                    None => Tensor::zeros(shape),
                });
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if wants($v) {
                    let n = nodes[$v.0].value.numel();
                    let $buf: &mut Vec<f64> = grads[$v.0].get_or_insert_with(|| vec![0.0; n]);
                    $body
                }
            };
        }
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let k = last_dim(av);
                let n = bv.shape()[1];
                let rows = av.numel() / k.max(1);
                with_grad!(*a, |ga| { gemm_nt(g, bv.data(), ga, rows, n, k) });
                with_grad!(*b, |gb| { gemm_tn(av.data(), g, gb, rows, k, n) });
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = if *trans_b { bv.shape()[1] } else { bv.shape()[2] };
                for s in 0..batch {
                    let ad = &av.data()[s * m * k..(s + 1) * m * k];
                    let bd = &bv.data()[s * k * n..(s + 1) * k * n];
                    let gd = &g[s * m * n..(s + 1) * m * n];
                    if *trans_b {
                        // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                        with_grad!(*a, |ga| { gemm_nn(gd, bd, &mut ga[s * m * k..(s + 1) * m * k], m, n, k) });
                        with_grad!(*b, |gb| { gemm_tn(gd, ad, &mut gb[s * n * k..(s + 1) * n * k], m, n, k) });
                    } else {
                        // C = A B: dA = dC Bᵀ, dB = Aᵀ dC
                        with_grad!(*a, |ga| { gemm_nt(gd, bd, &mut ga[s * m * k..(s + 1) * m * k], m, n, k) });
                        with_grad!(*b, |gb| { gemm_tn(ad, gd, &mut gb[s * k * n..(s + 1) * k * n], m, k, n) });
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[idx].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, sgn) in [(*a, 1.0), (*b, sign)] {
                    let full = val(v).numel() == g.len();
                    with_grad!(v, |gv| {
                        if full {
                            for (o, &x) in gv.iter_mut().zip(g) {
                                *o += sgn * x;
                            }
                        } else {
                            gv[0] += sgn * g.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let ov = val(other);
                    let full = val(v).numel() == g.len();
                    with_grad!(v, |gv| {
                        if full {
                            if ov.numel() == g.len() {
                                for ((o, &x), &y) in gv.iter_mut().zip(g).zip(ov.data()) {
                                    *o += x * y;
                                }
                            } else {
                                let y = ov.data()[0];
                                for (o, &x) in gv.iter_mut().zip(g) {
                                    *o += x * y;
                                }
                            }
                        } else {
                            gv[0] += g.iter().zip(ov.data()).map(|(x, y)| x * y).sum::<f64>();
                        }
                    });
                }
            }
            Op::Scale(a, c) => with_grad!(*a, |ga| {
                for (o, &x) in ga.iter_mut().zip(g) {
                    *o += c * x;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => with_grad!(*a, |ga| {
                for (o, &x) in ga.iter_mut().zip(g) {
                    *o += x;
                }
            }),
            Op::AddBias(a, b) => {
                with_grad!(*a, |ga| {
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                });
                let bn = val(*b).numel();
                with_grad!(*b, |gb| {
                    for chunk in g.chunks(bn) {
                        for (o, &x) in gb.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                });
            }
            Op::AddRows(a, r) | Op::MulRows(a, r) => {
                let is_mul = matches!(nodes[idx].op, Op::MulRows(..));
                let (av, rv) = (val(*a), val(*r));
                let batch = rv.shape()[0];
                let n = rv.shape()[1];
                let span = av.numel() / batch.max(1);
                with_grad!(*a, |ga| {
                    for s in 0..batch {
                        let rrow = &rv.data()[s * n..(s + 1) * n];
                        let gs = &g[s * span..(s + 1) * span];
                        for (ochunk, gchunk) in ga[s * span..(s + 1) * span].chunks_mut(n).zip(gs.chunks(n)) {
                            for ((o, &x), &y) in ochunk.iter_mut().zip(gchunk).zip(rrow) {
                                *o += if is_mul { x * y } else { x };
                            }
                        }
                    }
                });
                with_grad!(*r, |gr| {
                    for s in 0..batch {
                        let orow = &mut gr[s * n..(s + 1) * n];
                        let gs = &g[s * span..(s + 1) * span];
                        let as_ = &av.data()[s * span..(s + 1) * span];
                        for (gchunk, achunk) in gs.chunks(n).zip(as_.chunks(n)) {
                            for ((o, &x), &y) in orow.iter_mut().zip(gchunk).zip(achunk) {
                                *o += if is_mul { x * y } else { x };
                            }
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let av = val(*a);
                with_grad!(*a, |ga| {
                    for ((o, &x), &gx) in ga.iter_mut().zip(av.data()).zip(g) {
                        let s = sigmoid(x);
                        *o += gx * s * (1.0 + x * (1.0 - s));
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &nodes[idx].value;
                let n = last_dim(y);
                with_grad!(*x, |gx| {
                    for (r, ((orow, yrow), grow)) in gx.chunks_mut(n).zip(y.data().chunks(n)).zip(g.chunks(n)).enumerate() {
                        let mean_g = grow.iter().sum::<f64>() / n as f64;
                        let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let inv = inv_std[r];
                        // The floored branch is linear in x: dx = inv·(g − mean g).
                        let floored = inv >= 1.0 / LAYER_NORM_EPS;
                        for ((o, &gy), &yy) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += if floored {
                                inv * (gy - mean_g)
                            } else {
                                inv * (gy - mean_g - yy * mean_gy)
                            };
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &nodes[idx].value;
                let n = last_dim(y);
                with_grad!(*a, |ga| {
                    for ((orow, yrow), grow) in ga.chunks_mut(n).zip(y.data().chunks(n)).zip(g.chunks(n)) {
                        let dot = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>();
                        for ((o, &gy), &yy) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yy * (gy - dot);
                        }
                    }
                });
            }
            Op::Mse { pred, target, weights } => {
                let (pv, tv) = (val(*pred), val(*target));
                let count = pv.numel() as f64;
                let per = pv.numel() / weights.as_ref().map_or(1, |w| w.len()).max(1);
                with_grad!(*pred, |gp| {
                    for (i, ((o, &p), &t)) in gp.iter_mut().zip(pv.data()).zip(tv.data()).enumerate() {
                        let w = weights.as_ref().map_or(1.0, |w| w[i / per]);
                        *o += g[0] * w * 2.0 * (p - t) / count;
                    }
                });
            }
            Op::Sum(a) => with_grad!(*a, |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = val(*a).numel().max(1) as f64;
                with_grad!(*a, |ga| {
                    for o in ga.iter_mut() {
                        *o += g[0] / n;
                    }
                });
            }
            Op::Concat(a, b) => {
                let (na, nb) = (last_dim(val(*a)), last_dim(val(*b)));
                with_grad!(*a, |ga| {
                    for (o, gr) in ga.chunks_mut(na).zip(g.chunks(na + nb)) {
                        for (x, &y) in o.iter_mut().zip(&gr[..na]) {
                            *x += y;
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for (o, gr) in gb.chunks_mut(nb).zip(g.chunks(na + nb)) {
                        for (x, &y) in o.iter_mut().zip(&gr[na..]) {
                            *x += y;
                        }
                    }
                });
            }
            Op::SliceLast { x, start } => {
                let n = last_dim(val(*x));
                let len = last_dim(&nodes[idx].value);
                with_grad!(*x, |gx| {
                    for (o, gr) in gx.chunks_mut(n).zip(g.chunks(len)) {
                        for (x, &y) in o[*start..*start + len].iter_mut().zip(gr) {
                            *x += y;
                        }
                    }
                });
            }
            Op::GatherRows { table, idx: rows } => {
                let n = val(*table).shape()[1];
                with_grad!(*table, |gt| {
                    for (j, &r) in rows.iter().enumerate() {
                        for (o, &y) in gt[r * n..(r + 1) * n].iter_mut().zip(&g[j * n..(j + 1) * n]) {
                            *o += y;
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, numeric_gradient};

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let m = tape.constant(t2(&[&[1.5, -2.0], &[0.25, 7.0]])).unwrap();
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), tape.value(m));

        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = tape.constant(t2(&[&[1.0], &[1.0]])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        assert_eq!(tape.value(c).shape(), &[2, 1]);

        let z = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let any = tape.constant(Tensor::from_fn(vec![3, 4], |i| i as f64 - 3.0)).unwrap();
        let zc = tape.matmul(z, any).unwrap();
        assert_eq!(tape.value(zc), &Tensor::zeros(vec![2, 4]));

        let bad = tape.constant(Tensor::zeros(vec![3, 2])).unwrap();
        assert!(matches!(tape.matmul(a, bad), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_silu_layer_norm_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![1, 3])).unwrap();
        let s = tape.softmax(z).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let zero = tape.constant(Tensor::scalar(0.0)).unwrap();
        let sz = tape.silu(zero).unwrap();
        assert_eq!(tape.value(sz).item(), 0.0);

        let x = tape.constant(t2(&[&[1.0, 2.0, 3.0]])).unwrap();
        let y = tape.layer_norm(x).unwrap();
        let d = tape.value(y).data();
        let mean = d.iter().sum::<f64>() / 3.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
        // hand value: (1-2)/sqrt(2/3)
        assert!((d[0] + (1.5f64).sqrt()).abs() < 1e-12);

        let flat = tape.constant(Tensor::full(vec![2, 4], 3.0)).unwrap();
        let yf = tape.layer_norm(flat).unwrap();
        assert!(tape.value(yf).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse_examples() {
        let cases: [(&[f64], &[f64], f64); 3] = [
            (&[1.0, -2.0], &[1.0, -2.0], 0.0),
            (&[1.0, 1.0], &[0.0, 0.0], 1.0),
            (&[2.0, 0.0], &[0.0, 0.0], 2.0),
        ];
        for (p, t, expected) in cases {
            let mut tape = Tape::new();
            let p = tape.leaf(Tensor::new(vec![2], p.to_vec()).unwrap()).unwrap();
            let t = tape.constant(Tensor::new(vec![2], t.to_vec()).unwrap()).unwrap();
            let l = tape.mse_loss(p, t).unwrap();
            assert_eq!(tape.value(l).item(), expected);
        }
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::zeros(vec![2])).unwrap();
        let q = tape.leaf(Tensor::zeros(vec![2])).unwrap();
        assert_eq!(tape.mse_loss(p, q), Err(TensorError::TargetRequiresGrad));
        let r = tape.constant(Tensor::zeros(vec![3])).unwrap();
        assert!(tape.mse_loss(p, r).is_err());
    }

    #[test]
    fn mse_gradient_goes_to_prediction_only() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![2], vec![2.0, 0.0]).unwrap()).unwrap();
        let t = tape.constant(Tensor::zeros(vec![2])).unwrap();
        let l = tape.mse_loss(p, t).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[2.0, 0.0]);
        assert!(tape.grad(t).is_none());
    }

    #[test]
    fn backward_constant_and_linear() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_fn(vec![3], |i| i as f64)).unwrap();
        let c = tape.constant(Tensor::scalar(5.0)).unwrap();
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &Tensor::zeros(vec![3]));

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_fn(vec![3], |i| i as f64)).unwrap();
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &Tensor::ones(vec![3]));
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::ones(vec![2])).unwrap();
        assert!(matches!(tape.backward(w), Err(TensorError::NonScalarLoss(_))));
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(TensorError::TapeConsumed));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        let big = tape.constant(Tensor::full(vec![2], 1e300)).unwrap();
        assert!(matches!(tape.mul(big, big), Err(TensorError::NonFinite { op: "mul" })));
        assert!(tape.constant(Tensor::full(vec![1], f64::NAN)).is_err());
    }

    #[test]
    fn multi_consumer_gradients_sum() {
        // x*x + 3x versus the single-path (x + 3)·x, both with derivative 2x + 3.
        let x0 = Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone()).unwrap();
        let xx = tape.mul(x, x).unwrap();
        let x3 = tape.scale(x, 3.0).unwrap();
        let y = tape.add(xx, x3).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        let multi = tape.grad(x).unwrap().clone();

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone()).unwrap();
        let xc = tape.detach(x).unwrap();
        let xp3 = tape.add_scalar(xc, 3.0).unwrap();
        let y = tape.mul(x, xp3).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        // d/dx of x·(x+3) with the second factor frozen is (x+3); add x for the other path.
        let single: Vec<f64> = tape.grad(x).unwrap().data().iter().zip(x0.data()).map(|(g, x)| g + x).collect();
        assert_eq!(multi.data(), &single[..]);
        for (g, x) in multi.data().iter().zip(x0.data()) {
            assert_eq!(*g, 2.0 * x + 3.0);
        }
    }

    #[test]
    fn each_op_matches_finite_differences() {
        let a = Tensor::from_fn(vec![2, 3, 4], |i| ((i * 7919) % 13) as f64 / 6.0 - 1.0);
        let b = Tensor::from_fn(vec![4, 5], |i| ((i * 104729) % 11) as f64 / 5.0 - 1.0);
        let r = Tensor::from_fn(vec![2, 4], |i| ((i * 31) % 7) as f64 / 3.0 - 1.0);
        let c = Tensor::from_fn(vec![2, 3, 4], |i| ((i * 17) % 5) as f64 / 2.0 - 1.0);
        let table = Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.37).sin());
        let params = vec![a, b, r, c, table];
        let f = |tape: &mut Tape, p: &[Var]| -> Result<Var, TensorError> {
            let (a, b, r, c, table) = (p[0], p[1], p[2], p[3], p[4]);
            let ln = tape.layer_norm(a)?;
            let m = tape.mul_rows(ln, r)?;
            let m = tape.add_rows(m, r)?;
            let s = tape.silu(m)?;
            let scores = tape.bmm_nt(s, c)?;
            let sm = tape.softmax(scores)?;
            let mixed = tape.bmm(sm, c)?;
            let prod = tape.matmul(mixed, b)?;
            let sl = tape.slice_last(prod, 1, 3)?;
            let g = tape.gather_rows(table, &[2, 0])?;
            let g3 = tape.reshape(g, vec![2, 1, 4])?;
            let g3 = tape.slice_last(g3, 0, 3)?;
            let g3 = tape.reshape(g3, vec![2, 3])?;
            let bias = tape.slice_last(table, 0, 3)?;
            let bias = tape.reshape(bias, vec![3, 3])?;
            let sl = tape.add_bias(sl, bias)?;
            let cat = tape.concat(sl, sl)?;
            let sq = tape.mul(cat, cat)?;
            let diff = tape.sub(sq, cat)?;
            let mean = tape.mean(diff)?;
            let gsum = tape.sum(g3)?;
            let tot = tape.mul(mean, gsum)?;
            tape.add(tot, mean)
        };
        let report = grad_check(f, &params, 1e-5, 1e-6).unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
        let numeric = numeric_gradient(f, &params, 1e-5).unwrap();
        assert_eq!(numeric.len(), params.len());
    }

    #[test]
    fn weighted_mse_matches_manual() {
        let p = Tensor::from_fn(vec![2, 3], |i| i as f64 * 0.5);
        let t = Tensor::zeros(vec![2, 3]);
        let mut tape = Tape::new();
        let pv = tape.leaf(p.clone()).unwrap();
        let tv = tape.constant(t).unwrap();
        let l = tape.weighted_mse_loss(pv, tv, vec![1.0, 3.0]).unwrap();
        let d = p.data();
        let expected = (d[..3].iter().map(|v| v * v).sum::<f64>() + 3.0 * d[3..].iter().map(|v| v * v).sum::<f64>()) / 6.0;
        assert!((tape.value(l).item() - expected).abs() < 1e-15);
        let report = grad_check(
            |tape, p| {
                let t = tape.constant(Tensor::zeros(vec![2, 3]))?;
                tape.weighted_mse_loss(p[0], t, vec![1.0, 3.0])
            },
            &[p],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.pass);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::from_fn(vec![4, 4], |i| (i as f64).cos())).unwrap();
            let s = tape.softmax(a).unwrap();
            let m = tape.matmul(s, a).unwrap();
            let l = tape.mean(m).unwrap();
            tape.backward(l).unwrap();
            (tape.value(m).clone(), tape.grad(a).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
