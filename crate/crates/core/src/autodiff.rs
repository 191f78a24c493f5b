//! A small reverse-mode automatic differentiation tape over [`Matrix`].
//!
//! A [`Var`] owns its value and, when it depends on a trainable parameter, the
//! operation and parents that produced it. Values built only from constants
//! keep no history, so inference graphs free intermediates as soon as they go
//! out of scope.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::rc::Rc;

use crate::tensor::{matmul, matmul_at, matmul_bt, Matrix};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Floor applied to probabilities before taking logs in [`Var::nll`].
pub const LOG_CLAMP: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul,
    AddRow,
    Add,
    AddConst,
    MulConst(Matrix),
    Scale(f64),
    Relu,
    Gelu,
    SoftmaxRows,
    Attention {
        group: usize,
        scale: f64,
        coeffs: Vec<f64>,
    },
    ScatterCols {
        offset: usize,
        rows: Vec<bool>,
    },
    MaskedNorm {
        rows: Vec<bool>,
        inv_std: f64,
        count: usize,
    },
    FixedNorm {
        rows: Vec<bool>,
        inv_std: f64,
    },
    Nll {
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    Sum,
}

struct Node {
    id: u64,
    value: Matrix,
    grad: RefCell<Option<Matrix>>,
    requires_grad: bool,
    op: Op,
    parents: Vec<Var>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

/// Batch statistics produced by [`Var::masked_norm`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub var: f64,
    pub count: usize,
}

impl Var {
    fn new(value: Matrix, requires_grad: bool, op: Op, parents: Vec<Var>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            grad: RefCell::new(None),
            requires_grad,
            op,
            parents,
        }))
    }

    pub fn constant(value: Matrix) -> Self {
        Self::new(value, false, Op::Leaf, Vec::new())
    }

    /// A trainable leaf; its gradient is kept after [`Var::backward`].
    pub fn parameter(value: Matrix) -> Self {
        Self::new(value, true, Op::Leaf, Vec::new())
    }

    fn from_op(value: Matrix, op: Op, parents: Vec<Var>) -> Self {
        if parents.iter().any(|p| p.0.requires_grad) {
            Self::new(value, true, op, parents)
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Matrix {
        &self.0.value
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Matrix> {
        self.0.grad.borrow().clone()
    }

    pub fn matmul(&self, w: &Var) -> Var {
        let value = matmul(self.value(), w.value());
        Self::from_op(value, Op::MatMul, vec![self.clone(), w.clone()])
    }

    /// Adds a `1 x m` row vector to every row.
    pub fn add_row(&self, bias: &Var) -> Var {
        let b = bias.value();
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        assert_eq!(b.cols(), self.value().cols(), "bias width");
        let mut value = self.value().clone();
        for r in 0..value.rows() {
            value
                .row_mut(r)
                .iter_mut()
                .zip(b.as_slice())
                .for_each(|(v, b)| *v += b);
        }
        Self::from_op(value, Op::AddRow, vec![self.clone(), bias.clone()])
    }

    /// `x W + b`.
    pub fn linear(&self, w: &Var, b: &Var) -> Var {
        self.matmul(w).add_row(b)
    }

    pub fn add(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        Self::from_op(value, Op::Add, vec![self.clone(), other.clone()])
    }

    pub fn add_const(&self, c: &Matrix) -> Var {
        let value = self.value().zip_map(c, |a, b| a + b);
        Self::from_op(value, Op::AddConst, vec![self.clone()])
    }

    pub fn mul_const(&self, c: Matrix) -> Var {
        let value = self.value().zip_map(&c, |a, b| a * b);
        Self::from_op(value, Op::MulConst(c), vec![self.clone()])
    }

    pub fn scale(&self, s: f64) -> Var {
        let value = self.value().map(|v| v * s);
        Self::from_op(value, Op::Scale(s), vec![self.clone()])
    }

    pub fn relu(&self) -> Var {
        let value = self.value().map(|v| v.max(0.0));
        Self::from_op(value, Op::Relu, vec![self.clone()])
    }

    /// Gaussian error linear unit, `x * Phi(x)` (erf form).
    pub fn gelu(&self) -> Var {
        let value = self.value().map(gelu);
        Self::from_op(value, Op::Gelu, vec![self.clone()])
    }

    pub fn softmax_rows(&self) -> Var {
        let mut value = self.value().clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        Self::from_op(value, Op::SoftmaxRows, vec![self.clone()])
    }

    /// Block self-attention. Rows are grouped into consecutive blocks of
    /// `group` rows (one block per session). Within a block, output row `j` is
    /// `sum_i rho_ij v_i` with `rho_.j = softmax_i(scale * <k_i, q_j>)`.
    pub fn attention(q: &Var, k: &Var, v: &Var, group: usize, scale: f64) -> Var {
        let (value, coeffs) = attention_forward(q.value(), k.value(), v.value(), group, scale);
        Self::from_op(
            value,
            Op::Attention {
                group,
                scale,
                coeffs,
            },
            vec![q.clone(), k.clone(), v.clone()],
        )
    }

    /// Copies `src` into columns `[offset, offset + src.cols)` of the rows
    /// flagged in `rows`; other entries keep their value from `self`.
    pub fn scatter_cols(&self, src: &Var, offset: usize, rows: &[bool]) -> Var {
        let base = self.value();
        let s = src.value();
        assert_eq!(base.rows(), s.rows(), "scatter rows");
        assert_eq!(rows.len(), base.rows(), "scatter row mask");
        assert!(offset + s.cols() <= base.cols(), "scatter columns");
        let mut value = base.clone();
        for (r, _) in rows.iter().enumerate().filter(|(_, on)| **on) {
            value.row_mut(r)[offset..offset + s.cols()].copy_from_slice(s.row(r));
        }
        Self::from_op(
            value,
            Op::ScatterCols {
                offset,
                rows: rows.to_vec(),
            },
            vec![self.clone(), src.clone()],
        )
    }

    /// Standardises the flagged entries of a column vector with their own mean
    /// and (biased) variance; unflagged entries become 0. With fewer than two
    /// flagged entries the supplied fallback statistics are used instead.
    pub fn masked_norm(&self, rows: &[bool], eps: f64, fallback: (f64, f64)) -> (Var, NormStats) {
        let x = self.value();
        assert_eq!(x.cols(), 1, "masked_norm expects a column vector");
        assert_eq!(rows.len(), x.rows(), "masked_norm row mask");
        let count = rows.iter().filter(|r| **r).count();
        if count < 2 {
            let (mean, var) = fallback;
            let stats = NormStats { mean, var, count };
            return (self.fixed_norm(rows, mean, var, eps), stats);
        }
        let active = || x.as_slice().iter().zip(rows).filter(|(_, on)| **on).map(|(v, _)| *v);
        let n = count as f64;
        let mean = active().sum::<f64>() / n;
        let var = active().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        let value = Matrix::column_vector(
            x.as_slice()
                .iter()
                .zip(rows)
                .map(|(v, on)| if *on { (v - mean) * inv_std } else { 0.0 })
                .collect(),
        );
        let out = Self::from_op(
            value,
            Op::MaskedNorm {
                rows: rows.to_vec(),
                inv_std,
                count,
            },
            vec![self.clone()],
        );
        (out, NormStats { mean, var, count })
    }

    /// `(x - mean) / sqrt(var + eps)` on flagged rows, 0 elsewhere.
    pub fn fixed_norm(&self, rows: &[bool], mean: f64, var: f64, eps: f64) -> Var {
        let x = self.value();
        assert_eq!(x.cols(), 1, "fixed_norm expects a column vector");
        let inv_std = 1.0 / (var + eps).sqrt();
        let value = Matrix::column_vector(
            x.as_slice()
                .iter()
                .zip(rows)
                .map(|(v, on)| if *on { (v - mean) * inv_std } else { 0.0 })
                .collect(),
        );
        Self::from_op(
            value,
            Op::FixedNorm {
                rows: rows.to_vec(),
                inv_std,
            },
            vec![self.clone()],
        )
    }

    /// Weighted negative log-likelihood `-sum_r w_r ln max(p[r, t_r], LOG_CLAMP)`
    /// of the row distributions in `self`. Rows with zero weight are skipped.
    pub fn nll(&self, targets: &[usize], weights: &[f64]) -> Var {
        let p = self.value();
        assert_eq!(targets.len(), p.rows(), "nll targets");
        assert_eq!(weights.len(), p.rows(), "nll weights");
        let loss: f64 = targets
            .iter()
            .zip(weights)
            .enumerate()
            .filter(|(_, (_, w))| **w != 0.0)
            .map(|(r, (&t, &w))| -w * p.get(r, t).max(LOG_CLAMP).ln())
            .sum();
        Self::from_op(
            Matrix::scalar(loss),
            Op::Nll {
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            vec![self.clone()],
        )
    }

    /// Sum of `1 x 1` values.
    pub fn sum(terms: &[Var]) -> Var {
        let total = terms.iter().map(|t| t.value().item()).sum();
        Self::from_op(Matrix::scalar(total), Op::Sum, terms.to_vec())
    }

    /// Back-propagates from this scalar. Gradients accumulate on every
    /// parameter leaf reachable from it; intermediate gradients are dropped.
    pub fn backward(&self) {
        assert_eq!(self.value().len(), 1, "backward needs a scalar");
        if !self.requires_grad() {
            return;
        }
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !seen.insert(v.0.id) {
                continue;
            }
            for p in &v.0.parents {
                if p.requires_grad() && !seen.contains(&p.0.id) {
                    stack.push(p.clone());
                }
            }
            order.push(v);
        }
        // children always have larger ids than their parents
        order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        *self.0.grad.borrow_mut() = Some(Matrix::scalar(1.0));
        for node in &order {
            if node.0.parents.is_empty() {
                continue;
            }
            let Some(g) = node.0.grad.borrow_mut().take() else {
                continue;
            };
            let grads = node.parent_grads(&g);
            for (p, pg) in node.0.parents.iter().zip(grads) {
                if let Some(pg) = pg {
                    if !p.requires_grad() {
                        continue;
                    }
                    let mut slot = p.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&pg),
                        None => *slot = Some(pg),
                    }
                }
            }
        }
    }

    fn parent_grads(&self, g: &Matrix) -> Vec<Option<Matrix>> {
        let node = &self.0;
        let pv = |i: usize| node.parents[i].value();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul => {
                let ga = matmul_bt(g, pv(1));
                let gw = matmul_at(pv(0), g);
                vec![Some(ga), Some(gw)]
            }
            Op::AddRow => {
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    gb.as_mut_slice()
                        .iter_mut()
                        .zip(g.row(r))
                        .for_each(|(b, v)| *b += v);
                }
                vec![Some(g.clone()), Some(gb)]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::AddConst => vec![Some(g.clone())],
            Op::MulConst(c) => vec![Some(g.zip_map(c, |a, b| a * b))],
            Op::Scale(s) => vec![Some(g.map(|v| v * s))],
            Op::Relu => vec![Some(g.zip_map(&node.value, |g, y| if y > 0.0 { g } else { 0.0 }))],
            Op::Gelu => vec![Some(g.zip_map(pv(0), |g, x| g * gelu_grad(x)))],
            Op::SoftmaxRows => {
                let y = &node.value;
                let mut gz = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gz.row_mut(r)
                        .iter_mut()
                        .zip(yr.iter().zip(gr))
                        .for_each(|(o, (y, g))| *o = y * (g - inner));
                }
                vec![Some(gz)]
            }
            Op::Attention {
                group,
                scale,
                coeffs,
            } => {
                let (gq, gk, gv) = attention_backward(pv(0), pv(1), pv(2), g, coeffs, *group, *scale);
                vec![Some(gq), Some(gk), Some(gv)]
            }
            Op::ScatterCols { offset, rows } => {
                let width = pv(1).cols();
                let mut gbase = g.clone();
                let mut gsrc = Matrix::zeros(g.rows(), width);
                for (r, _) in rows.iter().enumerate().filter(|(_, on)| **on) {
                    gsrc.row_mut(r)
                        .copy_from_slice(&g.row(r)[*offset..*offset + width]);
                    gbase.row_mut(r)[*offset..*offset + width].fill(0.0);
                }
                vec![Some(gbase), Some(gsrc)]
            }
            Op::MaskedNorm {
                rows,
                inv_std,
                count,
            } => {
                let xhat = node.value.as_slice();
                let gs = g.as_slice();
                let n = *count as f64;
                let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                for ((gv, xv), on) in gs.iter().zip(xhat).zip(rows) {
                    if *on {
                        sum_g += gv;
                        sum_gx += gv * xv;
                    }
                }
                let gx = gs
                    .iter()
                    .zip(xhat)
                    .zip(rows)
                    .map(|((gv, xv), on)| {
                        if *on {
                            inv_std / n * (n * gv - sum_g - xv * sum_gx)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![Some(Matrix::column_vector(gx))]
            }
            Op::FixedNorm { rows, inv_std } => {
                let gx = g
                    .as_slice()
                    .iter()
                    .zip(rows)
                    .map(|(gv, on)| if *on { gv * inv_std } else { 0.0 })
                    .collect();
                vec![Some(Matrix::column_vector(gx))]
            }
            Op::Nll { targets, weights } => {
                let p = pv(0);
                let scale = g.item();
                let mut gp = Matrix::zeros(p.rows(), p.cols());
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let pt = p.get(r, t);
                    if w != 0.0 && pt > LOG_CLAMP {
                        gp.set(r, t, -scale * w / pt);
                    }
                }
                vec![Some(gp)]
            }
            Op::Sum => node.parents.iter().map(|_| Some(g.clone())).collect(),
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Coefficients of one attention block, stored `[i * group + j]`; every
/// column `j` sums to one over `i`.
pub fn attention_block_coeffs(q: &[&[f64]], k: &[&[f64]], scale: f64) -> Vec<f64> {
    let g = q.len();
    let mut coeffs = vec![0.0; g * g];
    let mut col = vec![0.0; g];
    for j in 0..g {
        for (i, c) in col.iter_mut().enumerate() {
            *c = scale * dot(k[i], q[j]);
        }
        softmax_in_place(&mut col);
        for (i, c) in col.iter().enumerate() {
            coeffs[i * g + j] = *c;
        }
    }
    coeffs
}

fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    group: usize,
    scale: f64,
) -> (Matrix, Vec<f64>) {
    let n = q.rows();
    assert!(group > 0 && n % group == 0, "attention rows not a multiple of the group size");
    assert_eq!(k.shape(), q.shape(), "attention key/query shapes");
    assert_eq!(v.rows(), n, "attention value rows");
    let mut out = Matrix::zeros(n, v.cols());
    let mut coeffs = Vec::with_capacity(n * group);
    for base in (0..n).step_by(group) {
        let qs: Vec<&[f64]> = (base..base + group).map(|r| q.row(r)).collect();
        let ks: Vec<&[f64]> = (base..base + group).map(|r| k.row(r)).collect();
        let block = attention_block_coeffs(&qs, &ks, scale);
        for j in 0..group {
            let orow = out.row_mut(base + j);
            for i in 0..group {
                let rho = block[i * group + j];
                orow.iter_mut()
                    .zip(v.row(base + i))
                    .for_each(|(o, x)| *o += rho * x);
            }
        }
        coeffs.extend(block);
    }
    (out, coeffs)
}

fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    g: &Matrix,
    coeffs: &[f64],
    group: usize,
    scale: f64,
) -> (Matrix, Matrix, Matrix) {
    let n = q.rows();
    let mut gq = Matrix::zeros(n, q.cols());
    let mut gk = Matrix::zeros(n, k.cols());
    let mut gv = Matrix::zeros(n, v.cols());
    let mut drho = vec![0.0; group * group];
    let mut ds = vec![0.0; group * group];
    for (blk, base) in (0..n).step_by(group).enumerate() {
        let rho = &coeffs[blk * group * group..(blk + 1) * group * group];
        for i in 0..group {
            for j in 0..group {
                let r = rho[i * group + j];
                let gout = g.row(base + j);
                drho[i * group + j] = dot(gout, v.row(base + i));
                gv.row_mut(base + i)
                    .iter_mut()
                    .zip(gout)
                    .for_each(|(a, b)| *a += r * b);
            }
        }
        for j in 0..group {
            let inner: f64 = (0..group).map(|i| rho[i * group + j] * drho[i * group + j]).sum();
            for i in 0..group {
                ds[i * group + j] = rho[i * group + j] * (drho[i * group + j] - inner);
            }
        }
        for i in 0..group {
            for j in 0..group {
                let s = scale * ds[i * group + j];
                if s == 0.0 {
                    continue;
                }
                let (qj, ki) = (q.row(base + j), k.row(base + i));
                gk.row_mut(base + i)
                    .iter_mut()
                    .zip(qj)
                    .for_each(|(a, b)| *a += s * b);
                gq.row_mut(base + j)
                    .iter_mut()
                    .zip(ki)
                    .for_each(|(a, b)| *a += s * b);
            }
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(rows: usize, cols: usize, salt: f64) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| ((i as f64 * 0.91 + salt) * 1.3).sin())
                .collect(),
        )
    }

    /// Central-difference check of `d loss / d param` for a closure building
    /// the loss from a parameter matrix.
    fn check_grad(param: Matrix, build: impl Fn(&Var) -> Var) {
        let p = Var::parameter(param.clone());
        build(&p).backward();
        let analytic = p.grad().expect("gradient");
        let h = 1e-6;
        for idx in 0..param.len() {
            let mut plus = param.clone();
            plus.as_mut_slice()[idx] += h;
            let mut minus = param.clone();
            minus.as_mut_slice()[idx] -= h;
            let fp = build(&Var::constant(plus)).value().item();
            let fm = build(&Var::constant(minus)).value().item();
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "coord {idx}: analytic {a} numeric {numeric}");
        }
    }

    fn reduce(v: &Var) -> Var {
        // fixed random projection to a scalar
        let w = sample(v.value().rows(), v.value().cols(), 7.0);
        let rows = v.value().rows();
        let prod = v.mul_const(w);
        let ones = Var::constant(Matrix::filled(prod.value().cols(), 1, 1.0));
        let col = prod.matmul(&ones);
        let t = Var::constant(Matrix::filled(1, rows, 1.0));
        t.matmul(&col)
    }

    #[test]
    fn linear_relu_gelu_grads() {
        let x = Var::constant(sample(4, 3, 0.0));
        let b = Var::constant(sample(1, 2, 1.0));
        check_grad(sample(3, 2, 2.0), |w| reduce(&x.linear(w, &b).gelu()));
        check_grad(sample(3, 2, 2.5), |w| reduce(&x.matmul(w).relu().scale(1.7)));
        let w = Var::constant(sample(3, 2, 3.0));
        check_grad(sample(1, 2, 4.0), |b| reduce(&x.linear(&w, b)));
    }

    #[test]
    fn softmax_and_nll_grads() {
        let targets = [0, 2, 1, 2];
        let weights = [1.0, 0.5, 0.0, 2.0];
        check_grad(sample(4, 3, 0.3), |z| z.softmax_rows().nll(&targets, &weights));
    }

    #[test]
    fn attention_grads() {
        let v = Var::constant(sample(6, 4, 5.0));
        check_grad(sample(6, 4, 0.1), |q| reduce(&Var::attention(q, q, q, 3, 0.5)));
        check_grad(sample(6, 4, 0.2), |q| reduce(&Var::attention(q, &v, &v, 2, 1.0)));
        check_grad(sample(6, 4, 0.4), |k| reduce(&Var::attention(&v, k, &v, 3, 1.0)));
    }

    #[test]
    fn attention_columns_are_normalised() {
        let x = sample(6, 4, 0.0);
        let (_, coeffs) = attention_forward(&x, &x, &x, 3, 0.5);
        for block in coeffs.chunks(9) {
            for j in 0..3 {
                let s: f64 = (0..3).map(|i| block[i * 3 + j]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scatter_and_norm_grads() {
        let rows = [true, false, true, true, false];
        let base = Var::constant(sample(5, 4, 0.0));
        check_grad(sample(5, 2, 1.0), |s| reduce(&base.scatter_cols(s, 1, &rows)));
        let src = Var::constant(sample(5, 2, 1.0));
        check_grad(sample(5, 4, 2.0), |b| reduce(&b.scatter_cols(&src, 2, &rows)));
        check_grad(sample(5, 1, 3.0), |x| reduce(&x.masked_norm(&rows, 1e-5, (0.0, 1.0)).0));
        check_grad(sample(5, 1, 3.0), |x| reduce(&x.fixed_norm(&rows, 0.2, 2.0, 1e-5)));
    }

    #[test]
    fn masked_norm_standardises_active_rows() {
        let rows = [true, true, false, true];
        let x = Var::constant(Matrix::column_vector(vec![1.0, 2.0, 100.0, 3.0]));
        let (y, stats) = x.masked_norm(&rows, 0.0, (0.0, 1.0));
        assert_eq!(stats.count, 3);
        assert!((stats.mean - 2.0).abs() < 1e-15);
        assert_eq!(y.value().get(2, 0), 0.0);
        let active: Vec<f64> = [0, 1, 3].iter().map(|&r| y.value().get(r, 0)).collect();
        let mean: f64 = active.iter().sum::<f64>() / 3.0;
        let var: f64 = active.iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shared_parent_accumulates() {
        let p = Var::parameter(Matrix::scalar(3.0));
        let y = Var::sum(&[p.clone(), p.scale(2.0)]);
        y.backward();
        assert_eq!(p.grad().unwrap().item(), 3.0);
    }

    #[test]
    fn constants_keep_no_history() {
        let x = Var::constant(sample(2, 2, 0.0));
        let y = x.relu().softmax_rows();
        assert!(!y.requires_grad());
        assert!(y.0.parents.is_empty());
    }
}
