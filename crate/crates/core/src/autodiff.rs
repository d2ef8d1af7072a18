//! Tape-based reverse-mode differentiation over the kernel operations.
//!
//! A [`Tape`] records every primitive application in topological order along
//! with the forward values the backward rules need. Parameters are registered
//! by name; registering the same name twice returns the same node, so a
//! parameter used at several graph sites (a shared projection, or a projection
//! used once directly and once transposed) accumulates the sum of all site
//! contributions in [`Tape::backward`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernel::{self, matmul, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Hadamard(usize, usize),
    /// Elementwise product with a recorded constant (dropout masks).
    MulConst(usize, Matrix),
    Scale(usize, f64),
    Transpose(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(usize),
    Gelu(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Sum(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
struct ParamEntry {
    var: Var,
    trainable: bool,
}

/// Accumulated gradients, keyed by parameter name. Every trainable parameter
/// registered on the tape appears (zero if the output does not depend on it);
/// frozen parameters never do.
pub type GradStore = BTreeMap<String, Matrix>;

/// Named parameter values, as consumed by graph builders and [`gradcheck`].
pub type ParamSet = BTreeMap<String, Matrix>;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, ParamEntry>,
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

    /// Runs `build` on this tape and returns its output together with the
    /// scalar value of that output.
    pub fn record<F>(&mut self, build: F) -> Result<(Var, f64)>
    where
        F: FnOnce(&mut Tape) -> Result<Var>,
    {
        let out = build(self)?;
        let v = self.value(out);
        if v.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "recorded output must be scalar, got {:?}",
                v.shape()
            )));
        }
        Ok((out, v.item()))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Registers a named parameter. A name already on the tape returns its
    /// existing node; its value and trainable flag must match.
    pub fn param(&mut self, name: &str, value: &Matrix, trainable: bool) -> Result<Var> {
        if let Some(entry) = self.params.get(name) {
            if entry.trainable != trainable || self.value(entry.var).shape() != value.shape() {
                return Err(Error::Contract(format!(
                    "parameter `{name}` re-registered with a different shape or trainable flag"
                )));
            }
            return Ok(entry.var);
        }
        let var = self.push(value.clone(), Op::Leaf, trainable);
        self.params
            .insert(name.to_string(), ParamEntry { var, trainable });
        Ok(var)
    }

    /// Unnamed constant input (images, masks); never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::MatMul(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::Add(a.0, b.0), rg))
    }

    /// Broadcast-adds a 1xC row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        let rg = self.rg(a.0) || self.rg(row.0);
        Ok(self.push(v, Op::AddRow(a.0, row.0), rg))
    }

    /// Scales column `j` of `a` by `row[j]`, i.e. `a * diag(row)`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).mul_row(self.value(row))?;
        let rg = self.rg(a.0) || self.rg(row.0);
        Ok(self.push(v, Op::MulRow(a.0, row.0), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::Hadamard(a.0, b.0), rg))
    }

    /// Multiplies by a fixed mask that is saved on the tape, so backward uses
    /// exactly the sampled mask.
    pub fn dropout_mask(&mut self, a: Var, mask: Matrix) -> Result<Var> {
        let v = self.value(a).hadamard(&mask)?;
        let rg = self.rg(a.0);
        Ok(self.push(v, Op::MulConst(a.0, mask), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a.0);
        self.push(v, Op::Scale(a.0, s), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(a.0);
        self.push(v, Op::Transpose(a.0), rg)
    }

    /// Row-wise layer normalization; `gamma` and `beta` are 1xC rows.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, normed, inv_std) = kernel::layernorm_with_stats(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = kernel::softmax_rows(self.value(a));
        let rg = self.rg(a.0);
        self.push(v, Op::Softmax(a.0), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = kernel::gelu(self.value(a));
        let rg = self.rg(a.0);
        self.push(v, Op::Gelu(a.0), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&mats)?;
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&mats)?;
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, len)?;
        let rg = self.rg(a.0);
        Ok(self.push(v, Op::SliceCols(a.0, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(a.0);
        Ok(self.push(v, Op::SliceRows(a.0, start), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a.0);
        self.push(v, Op::Sum(a.0), rg)
    }

    /// Mean softmax cross-entropy of `logits` (BxK) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != labels.len() || labels.iter().any(|&y| y >= z.cols()) {
            return Err(Error::dim("cross_entropy", z.shape(), (labels.len(), 1)));
        }
        let probs = kernel::softmax_rows(z);
        let loss = cross_entropy_value(z, labels);
        let rg = self.rg(logits.0);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<GradStore> {
        let out = &self.nodes[output.0];
        if out.value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            // Leaves keep their gradient; everything else is consumed here.
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            for (input, contrib) in self.local_grads(node, &g)? {
                accumulate(&mut grads[input], contrib)?;
            }
        }

        let mut store = GradStore::new();
        for (name, entry) in &self.params {
            if !entry.trainable {
                continue;
            }
            let g = grads
                .get_mut(entry.var.0)
                .and_then(Option::take)
                .unwrap_or_else(|| {
                    let v = self.value(entry.var);
                    Matrix::zeros(v.rows(), v.cols())
                });
            store.insert(name.clone(), g);
        }
        Ok(store)
    }

    /// Gradient contributions of one node to each of its inputs that needs one.
    fn local_grads(&self, node: &Node, g: &Matrix) -> Result<Vec<(usize, Matrix)>> {
        let val = |i: usize| &self.nodes[i].value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    out.push((*a, matmul(g, &val(*b).transpose())?));
                }
                if self.rg(*b) {
                    out.push((*b, matmul(&val(*a).transpose(), g)?));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.clone()));
                }
                if self.rg(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    out.push((*a, g.clone()));
                }
                if self.rg(*row) {
                    out.push((*row, g.col_sums()));
                }
            }
            Op::MulRow(a, row) => {
                if self.rg(*a) {
                    out.push((*a, g.mul_row(val(*row))?));
                }
                if self.rg(*row) {
                    out.push((*row, g.hadamard(val(*a))?.col_sums()));
                }
            }
            Op::Hadamard(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.hadamard(val(*b))?));
                }
                if self.rg(*b) {
                    out.push((*b, g.hadamard(val(*a))?));
                }
            }
            Op::MulConst(a, mask) => out.push((*a, g.hadamard(mask)?)),
            Op::Scale(a, s) => out.push((*a, g.scale(*s))),
            Op::Transpose(a) => out.push((*a, g.transpose())),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                if self.rg(*x) {
                    let gam = val(*gamma);
                    let n = normed.cols() as f64;
                    let mut dx = Matrix::zeros(normed.rows(), normed.cols());
                    for r in 0..normed.rows() {
                        let xhat = normed.row(r);
                        let dxhat: Vec<f64> =
                            g.row(r).iter().zip(gam.data()).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = inv_std[r] * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, g.hadamard(normed)?.col_sums()));
                }
                if self.rg(*beta) {
                    out.push((*beta, g.col_sums()));
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                        *d = y.get(r, c) * (g.get(r, c) - dot);
                    }
                }
                out.push((*a, da));
            }
            Op::Gelu(a) => {
                let x = val(*a);
                out.push((*a, g.hadamard(&x.map(kernel::gelu_grad_scalar))?));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.rg(p) {
                        out.push((p, g.slice_cols(off, w)?));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = val(p).rows();
                    if self.rg(p) {
                        out.push((p, g.slice_rows(off, h)?));
                    }
                    off += h;
                }
            }
            Op::SliceCols(a, start) => {
                let src = val(*a);
                let mut da = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                out.push((*a, da));
            }
            Op::SliceRows(a, start) => {
                let src = val(*a);
                let mut da = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    da.row_mut(start + r).copy_from_slice(g.row(r));
                }
                out.push((*a, da));
            }
            Op::Sum(a) => {
                let src = val(*a);
                out.push((*a, Matrix::filled(src.rows(), src.cols(), g.item())));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len() as f64;
                let mut dz = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let cur = dz.get(r, y);
                    dz.set(r, y, cur - 1.0);
                }
                out.push((*logits, dz.scale(g.item() / b)));
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Matrix>, contrib: Matrix) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&contrib),
        None => {
            *slot = Some(contrib);
            Ok(())
        }
    }
}

/// Mean softmax cross-entropy, computed with a log-sum-exp per row.
pub fn cross_entropy_value(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Central-difference check of every entry of every parameter in `params`.
///
/// `build` must register each parameter through [`Tape::param`] under its map
/// key and must be deterministic (seed any dropout inside it). Relative error
/// per entry is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradcheck<F>(build: F, params: &ParamSet, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let out = build(&mut tape, p)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let out = build(&mut tape, params)?;
    let analytic = tape.backward(out)?;

    let mut checks = Vec::with_capacity(params.len());
    let mut perturbed = params.clone();
    for (name, value) in params {
        let zeros = Matrix::zeros(value.rows(), value.cols());
        let grad = analytic.get(name).unwrap_or(&zeros);
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            max_abs_analytic: 0.0,
            max_abs_numeric: 0.0,
        };
        for i in 0..value.len() {
            let orig = value.data()[i];
            perturbed.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = eval(&perturbed)?;
            perturbed.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = eval(&perturbed)?;
            perturbed.get_mut(name).unwrap().data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.max_abs_analytic = check.max_abs_analytic.max(a.abs());
            check.max_abs_numeric = check.max_abs_numeric.max(numeric.abs());
        }
        checks.push(check);
    }
    let max_rel_error = checks.iter().fold(0.0f64, |m, c| m.max(c.max_rel_error));
    Ok(GradCheckReport {
        params: checks,
        max_rel_error,
        tol,
        passed: max_rel_error <= tol,
    })
}
