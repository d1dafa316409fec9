//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation with its value. [`Tape::backward`] walks
//! the record in reverse and returns the gradient of a scalar node with
//! respect to every node that requires one. The op set is exactly what the
//! encoder and the distillation losses need.

use crate::error::{Error, Result};
use crate::kron::{kron_linear_rows, KronFactorPair};
use crate::tensor::{dot, Matrix};

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
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    /// `a · b`
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    /// `x + 1·row`
    AddRow(Var, Var),
    /// Rows of `x` mapped by `(A⊗B)`.
    KronRows {
        x: Var,
        a: Var,
        b: Var,
    },
    /// Row `t` is `table[ids[t]] ⊗ row`.
    KronEmbed {
        ids: Vec<usize>,
        table: Var,
        row: Var,
    },
    Gather {
        ids: Vec<usize>,
        table: Var,
    },
    TakeRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    MeanRows(Var),
    Transpose(Var),
    SumSquares(Var),
    Mse(Var, Var),
    /// Cross-entropy of a `1×k` logit row against a class index.
    SoftmaxCe {
        logits: Var,
        label: usize,
        probs: Matrix,
    },
    /// `T² · KL(softmax(t/T) ‖ softmax(s/T))` for a `1×k` logit row.
    SoftKl {
        logits: Var,
        target: Matrix,
        probs: Matrix,
        temperature: f64,
    },
    Sum(Vec<Var>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zero if nothing flowed into it.
    pub fn get_or_zero(&self, v: Var) -> Matrix {
        self.grads[v.0].clone().unwrap_or_else(|| {
            let (r, c) = self.shapes[v.0];
            Matrix::zeros(r, c)
        })
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

pub fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        softmax_row(z.row(i), out.row_mut(i));
    }
    out
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::shape(
        op,
        format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
    )
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            value: m,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            value: m,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xm, r) = (self.value(x), self.value(row));
        if r.rows() != 1 || r.cols() != xm.cols() {
            return Err(shape_err("add_row", xm, r));
        }
        let mut v = xm.clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(r.as_slice()) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddRow(x, row), &[x, row]))
    }

    pub fn kron_rows(&mut self, x: Var, a: Var, b: Var) -> Result<Var> {
        // the pair is rebuilt from tape values; cloning keeps the tape the
        // single owner of every value
        let pair = KronFactorPair::new(self.value(a).clone(), self.value(b).clone());
        let v = kron_linear_rows(&pair, self.value(x))?;
        Ok(self.push(v, Op::KronRows { x, a, b }, &[x, a, b]))
    }

    pub fn kron_embed(&mut self, ids: &[usize], table: Var, row: Var) -> Result<Var> {
        let (t, r) = (self.value(table), self.value(row));
        if r.rows() != 1 {
            return Err(Error::shape(
                "kron_embed",
                format!("row factor must be 1xn, got {}x{}", r.rows(), r.cols()),
            ));
        }
        let v = crate::model::kron_embed_rows(t, r, ids, &mut crate::kron::NoCount)?;
        Ok(self.push(
            v,
            Op::KronEmbed {
                ids: ids.to_vec(),
                table,
                row,
            },
            &[table, row],
        ))
    }

    pub fn gather(&mut self, ids: &[usize], table: Var) -> Result<Var> {
        let t = self.value(table);
        let rows = ids.len().max(1);
        let mut v = Matrix::zeros(rows, t.cols());
        for (k, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::Index {
                    id,
                    vocab: t.rows(),
                });
            }
            v.row_mut(k).copy_from_slice(t.row(id));
        }
        Ok(self.push(
            v,
            Op::Gather {
                ids: ids.to_vec(),
                table,
            },
            &[table],
        ))
    }

    /// First `n` rows.
    pub fn take_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xm = self.value(x);
        if n == 0 || n > xm.rows() {
            return Err(Error::shape(
                "take_rows",
                format!("cannot take {n} of {} rows", xm.rows()),
            ));
        }
        let v = Matrix::new(n, xm.cols(), xm.as_slice()[..n * xm.cols()].to_vec())?;
        Ok(self.push(v, Op::TakeRows(x), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xm = self.value(x);
        if len == 0 || start + len > xm.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {}", start + len, xm.cols()),
            ));
        }
        let v = Matrix::from_fn(xm.rows(), len, |i, j| xm[(i, start + j)]);
        Ok(self.push(v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), m));
            }
            cols += m.cols();
        }
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            for i in 0..rows {
                v.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        self.push(v, Op::SoftmaxRows(x), &[x])
    }

    /// Per-row normalization with `1×c` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xm, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xm.cols();
        if g.shape() != (1, c) || b.shape() != (1, c) {
            return Err(shape_err("layer_norm", xm, g));
        }
        let mut xhat = Matrix::zeros(xm.rows(), c);
        let mut inv_std = Vec::with_capacity(xm.rows());
        let mut out = Matrix::zeros(xm.rows(), c);
        for i in 0..xm.rows() {
            let row = xm.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[(i, j)] = h;
                out[(i, j)] = h * g.as_slice()[j] + b.as_slice()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Column means as a `1×c` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let n = xm.rows() as f64;
        let v = Matrix::from_fn(1, xm.cols(), |_, j| {
            (0..xm.rows()).map(|i| xm[(i, j)]).sum::<f64>() / n
        });
        self.push(v, Op::MeanRows(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let v = Matrix::filled(1, 1, dot(xm.as_slice(), xm.as_slice()));
        self.push(v, Op::SumSquares(x), &[x])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.shape() != bm.shape() {
            return Err(shape_err("mse", am, bm));
        }
        let v = mse_value(am, bm);
        Ok(self.push(Matrix::filled(1, 1, v), Op::Mse(a, b), &[a, b]))
    }

    pub fn softmax_ce(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != 1 || label >= z.cols() {
            return Err(Error::shape(
                "softmax_ce",
                format!("label {label} for logits {}x{}", z.rows(), z.cols()),
            ));
        }
        let probs = softmax_rows(z);
        let v = -probs.as_slice()[label].ln();
        Ok(self.push(
            Matrix::filled(1, 1, v),
            Op::SoftmaxCe {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    pub fn soft_kl(
        &mut self,
        logits: Var,
        teacher_logits: &Matrix,
        temperature: f64,
    ) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != teacher_logits.shape() || z.rows() != 1 {
            return Err(shape_err("soft_kl", z, teacher_logits));
        }
        let target = softmax_rows(&teacher_logits.scale(1.0 / temperature));
        let probs = softmax_rows(&z.scale(1.0 / temperature));
        let v = soft_kl_value(&target, &probs, temperature);
        Ok(self.push(
            Matrix::filled(1, 1, v),
            Op::SoftKl {
                logits,
                target,
                probs,
                temperature,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let v: f64 = parts.iter().map(|&p| self.scalar(p)).sum();
        self.push(Matrix::filled(1, 1, v), Op::Sum(parts.to_vec()), parts)
    }

    /// Gradients of the `1×1` node `root`.
    pub fn backward(&self, root: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward needs a scalar root"
        );
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads, shapes }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, d: Matrix| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d).expect("gradient shape"),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    acc(*a, g.matmul_t(bm).unwrap());
                }
                if self.needs(*b) {
                    acc(*b, am.t_matmul(g).unwrap());
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    acc(*a, g.matmul(bm).unwrap());
                }
                if self.needs(*b) {
                    acc(*b, g.t_matmul(am).unwrap());
                }
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                if self.needs(*row) {
                    let cols = g.cols();
                    let r = Matrix::from_fn(1, cols, |_, j| (0..g.rows()).map(|i| g[(i, j)]).sum());
                    acc(*row, r);
                }
            }
            Op::KronRows { x, a, b } => {
                let (xm, am, bm) = (self.value(*x), self.value(*a), self.value(*b));
                let (m1, n1) = am.shape();
                let (m2, n2) = bm.shape();
                let mut da = Matrix::zeros(m1, n1);
                let mut db = Matrix::zeros(m2, n2);
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                // per token: Y = A Z Bᵀ with Z = x_t as n1×n2, G = g_t as m1×m2
                for t in 0..xm.rows() {
                    let z = Matrix::new(n1, n2, xm.row(t).to_vec()).unwrap();
                    let gt = Matrix::new(m1, m2, g.row(t).to_vec()).unwrap();
                    let gb = gt.matmul(bm).unwrap(); // m1×n2
                    if self.needs(*a) {
                        da.add_assign(&gb.matmul_t(&z).unwrap()).unwrap();
                    }
                    if self.needs(*b) {
                        let az = am.matmul(&z).unwrap(); // m1×n2
                        db.add_assign(&gt.t_matmul(&az).unwrap()).unwrap();
                    }
                    if self.needs(*x) {
                        let dz = am.t_matmul(&gb).unwrap(); // n1×n2
                        dx.row_mut(t).copy_from_slice(dz.as_slice());
                    }
                }
                acc(*a, da);
                acc(*b, db);
                acc(*x, dx);
            }
            Op::KronEmbed { ids, table, row } => {
                let (tm, rm) = (self.value(*table), self.value(*row));
                let (k, n) = (tm.cols(), rm.cols());
                let mut dt = Matrix::zeros(tm.rows(), k);
                let mut dr = Matrix::zeros(1, n);
                for (t, &id) in ids.iter().enumerate() {
                    let gt = g.row(t);
                    for j in 0..k {
                        let a = tm[(id, j)];
                        let mut s = 0.0;
                        for q in 0..n {
                            s += gt[j * n + q] * rm.as_slice()[q];
                            dr.as_mut_slice()[q] += gt[j * n + q] * a;
                        }
                        dt[(id, j)] += s;
                    }
                }
                acc(*table, dt);
                acc(*row, dr);
            }
            Op::Gather { ids, table } => {
                let tm = self.value(*table);
                let mut dt = Matrix::zeros(tm.rows(), tm.cols());
                for (t, &id) in ids.iter().enumerate() {
                    for (o, v) in dt.row_mut(id).iter_mut().zip(g.row(t)) {
                        *o += v;
                    }
                }
                acc(*table, dt);
            }
            Op::TakeRows(x) => {
                let xm = self.value(*x);
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                dx.as_mut_slice()[..g.len()].copy_from_slice(g.as_slice());
                acc(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let xm = self.value(*x);
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                for i in 0..g.rows() {
                    dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let d = Matrix::from_fn(g.rows(), c, |i, j| g[(i, off + j)]);
                    acc(p, d);
                    off += c;
                }
            }
            Op::SoftmaxRows(x) => {
                let p = &node.value;
                let mut dx = Matrix::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let s = dot(g.row(i), p.row(i));
                    for j in 0..p.cols() {
                        dx[(i, j)] = p[(i, j)] * (g[(i, j)] - s);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma);
                let c = xhat.cols();
                if self.needs(*gamma) {
                    let dg = Matrix::from_fn(1, c, |_, j| {
                        (0..g.rows()).map(|i| g[(i, j)] * xhat[(i, j)]).sum()
                    });
                    acc(*gamma, dg);
                }
                if self.needs(*beta) {
                    let db = Matrix::from_fn(1, c, |_, j| (0..g.rows()).map(|i| g[(i, j)]).sum());
                    acc(*beta, db);
                }
                if self.needs(*x) {
                    let mut dx = Matrix::zeros(g.rows(), c);
                    let nf = c as f64;
                    for i in 0..g.rows() {
                        let dh: Vec<f64> = (0..c).map(|j| g[(i, j)] * gm.as_slice()[j]).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(xhat.row(i)).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[(i, j)] =
                                inv_std[i] / nf * (nf * dh[j] - sum_dh - xhat[(i, j)] * sum_dh_h);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Gelu(x) => {
                let xm = self.value(*x);
                let d = Matrix::from_fn(xm.rows(), xm.cols(), |i, j| {
                    g[(i, j)] * gelu_grad(xm[(i, j)])
                });
                acc(*x, d);
            }
            Op::MeanRows(x) => {
                let xm = self.value(*x);
                let n = xm.rows() as f64;
                let d = Matrix::from_fn(xm.rows(), xm.cols(), |_, j| g.as_slice()[j] / n);
                acc(*x, d);
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::SumSquares(x) => {
                let s = g.as_slice()[0];
                acc(*x, self.value(*x).scale(2.0 * s));
            }
            Op::Mse(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let s = 2.0 * g.as_slice()[0] / am.len() as f64;
                let diff = am.sub(bm).unwrap();
                if self.needs(*a) {
                    acc(*a, diff.scale(s));
                }
                if self.needs(*b) {
                    acc(*b, diff.scale(-s));
                }
            }
            Op::SoftmaxCe {
                logits,
                label,
                probs,
            } => {
                let mut d = probs.clone();
                d.as_mut_slice()[*label] -= 1.0;
                acc(*logits, d.scale(g.as_slice()[0]));
            }
            Op::SoftKl {
                logits,
                target,
                probs,
                temperature,
            } => {
                // d/dz [T² Σ t log(t/p)] with p = softmax(z/T) is T (p − t)
                let d = probs
                    .sub(target)
                    .unwrap()
                    .scale(*temperature * g.as_slice()[0]);
                acc(*logits, d);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    acc(p, g.clone());
                }
            }
        }
    }
}

pub fn mse_value(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

pub fn soft_kl_value(target: &Matrix, probs: &Matrix, temperature: f64) -> f64 {
    let kl: f64 = target
        .as_slice()
        .iter()
        .zip(probs.as_slice())
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, p)| t * (t / p).ln())
        .sum();
    temperature * temperature * kl
}
