//! Kronecker algebra.
//!
//! A weight `W = A ⊗ B` with `A: m1×n1` and `B: m2×n2` is applied to a vector
//! `x` of length `n1·n2` as `vec(B · R(x) · Aᵀ)`, where `R(x)` splits `x` into
//! `n1` columns of length `n2`. The product is evaluated in whichever of the
//! two association orders needs fewer floating point operations, and `A⊗B` is
//! never formed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::FactorShape;
use crate::tensor::Matrix;

/// `W = a ⊗ b`.
#[derive(Debug, Clone, PartialEq)]
pub struct KronFactorPair {
    pub a: Matrix,
    pub b: Matrix,
}

impl KronFactorPair {
    pub fn new(a: Matrix, b: Matrix) -> Self {
        Self { a, b }
    }

    pub fn shape(&self) -> FactorShape {
        FactorShape {
            m1: self.a.rows(),
            n1: self.a.cols(),
            m2: self.b.rows(),
            n2: self.b.cols(),
        }
    }

    pub fn rows(&self) -> usize {
        self.a.rows() * self.b.rows()
    }

    pub fn cols(&self) -> usize {
        self.a.cols() * self.b.cols()
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Association order for `B · R(x) · Aᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Association {
    /// `(B · R(x)) · Aᵀ`
    BFirst,
    /// `B · (R(x) · Aᵀ)`
    AFirst,
}

/// FLOPs of the two association orders, `(b_first, a_first)`.
pub fn association_costs(s: FactorShape) -> (u64, u64) {
    let (m1, n1, m2, n2) = (s.m1 as u64, s.n1 as u64, s.m2 as u64, s.n2 as u64);
    let b_first = (2 * n2 - 1) * m2 * n1 + (2 * n1 - 1) * m2 * m1;
    let a_first = (2 * n1 - 1) * n2 * m1 + (2 * n2 - 1) * m2 * m1;
    (b_first, a_first)
}

pub fn choose_association(s: FactorShape) -> Association {
    let (b_first, a_first) = association_costs(s);
    if a_first < b_first {
        Association::AFirst
    } else {
        Association::BFirst
    }
}

/// FLOPs of one Kronecker matvec at the cheaper association order.
pub fn kron_flops(s: FactorShape) -> u64 {
    let (b_first, a_first) = association_costs(s);
    b_first.min(a_first)
}

/// `(2n − 1)·m`: one multiply and one add per term, `n − 1` adds per output.
pub fn dense_matvec_flops(m: usize, n: usize) -> u64 {
    (2 * n as u64 - 1) * m as u64
}

/// Receives operation counts from the kernels.
pub trait OpCounter {
    fn record(&mut self, muls: u64, adds: u64);
}

/// Default counter: records nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoCount;

impl OpCounter for NoCount {
    #[inline(always)]
    fn record(&mut self, _muls: u64, _adds: u64) {}
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct FlopCounter {
    pub muls: u64,
    pub adds: u64,
}

impl FlopCounter {
    pub fn total(&self) -> u64 {
        self.muls + self.adds
    }
}

impl OpCounter for FlopCounter {
    #[inline]
    fn record(&mut self, muls: u64, adds: u64) {
        self.muls += muls;
        self.adds += adds;
    }
}

/// `Σ_k first(k) · second(k)`, counting `len` multiplies and `len − 1` adds.
#[inline]
fn counted_dot<C: OpCounter>(
    len: usize,
    first: impl Fn(usize) -> f64,
    second: impl Fn(usize) -> f64,
    counter: &mut C,
) -> f64 {
    let mut s = first(0) * second(0);
    for k in 1..len {
        s += first(k) * second(k);
    }
    counter.record(len as u64, len as u64 - 1);
    s
}

/// Core kernel on slices: `out = (A⊗B)·x`.
///
/// `x[j·n2 + q]` is entry `(q, j)` of `R(x)`; `out[i·m2 + p]` is entry `(p, i)`
/// of `B·R(x)·Aᵀ`. The scratch buffer is resized as needed.
pub(crate) fn apply_into<C: OpCounter>(
    pair: &KronFactorPair,
    order: Association,
    x: &[f64],
    out: &mut [f64],
    scratch: &mut Vec<f64>,
    counter: &mut C,
) {
    let (a, b) = (&pair.a, &pair.b);
    let (m1, n1, m2, n2) = (a.rows(), a.cols(), b.rows(), b.cols());
    debug_assert_eq!(x.len(), n1 * n2);
    debug_assert_eq!(out.len(), m1 * m2);
    let (av, bv) = (a.as_slice(), b.as_slice());
    match order {
        Association::BFirst => {
            // t[p, j] = Σ_q B[p, q] · x[j·n2 + q]
            scratch.resize(m2 * n1, 0.0);
            for p in 0..m2 {
                for j in 0..n1 {
                    scratch[p * n1 + j] =
                        counted_dot(n2, |q| bv[p * n2 + q], |q| x[j * n2 + q], counter);
                }
            }
            // y[p, i] = Σ_j t[p, j] · A[i, j]
            for i in 0..m1 {
                for p in 0..m2 {
                    out[i * m2 + p] =
                        counted_dot(n1, |j| scratch[p * n1 + j], |j| av[i * n1 + j], counter);
                }
            }
        }
        Association::AFirst => {
            // s[q, i] = Σ_j x[j·n2 + q] · A[i, j]
            scratch.resize(n2 * m1, 0.0);
            for q in 0..n2 {
                for i in 0..m1 {
                    scratch[q * m1 + i] =
                        counted_dot(n1, |j| x[j * n2 + q], |j| av[i * n1 + j], counter);
                }
            }
            // y[p, i] = Σ_q B[p, q] · s[q, i]
            for i in 0..m1 {
                for p in 0..m2 {
                    out[i * m2 + p] =
                        counted_dot(n2, |q| bv[p * n2 + q], |q| scratch[q * m1 + i], counter);
                }
            }
        }
    }
}

/// Explicit block product; used as a reference and for reconstruction.
pub fn kron_product(pair: &KronFactorPair) -> Matrix {
    let (a, b) = (&pair.a, &pair.b);
    let (m2, n2) = b.shape();
    Matrix::from_fn(pair.rows(), pair.cols(), |r, c| {
        a[(r / m2, c / n2)] * b[(r % m2, c % n2)]
    })
}

pub fn kron_matvec(pair: &KronFactorPair, x: &Matrix) -> Result<Matrix> {
    kron_matvec_with(pair, x, choose_association(pair.shape()), &mut NoCount)
}

pub fn kron_matvec_counted(
    pair: &KronFactorPair,
    x: &Matrix,
    counter: &mut FlopCounter,
) -> Result<Matrix> {
    kron_matvec_with(pair, x, choose_association(pair.shape()), counter)
}

/// Matvec with an explicit association order.
pub fn kron_matvec_with<C: OpCounter>(
    pair: &KronFactorPair,
    x: &Matrix,
    order: Association,
    counter: &mut C,
) -> Result<Matrix> {
    if !x.is_column() || x.rows() != pair.cols() {
        return Err(Error::shape(
            "kron_matvec",
            format!(
                "factor pair {} expects a column of length {}, got {}x{}",
                pair.shape(),
                pair.cols(),
                x.rows(),
                x.cols()
            ),
        ));
    }
    let mut out = Matrix::zeros(pair.rows(), 1);
    let mut scratch = Vec::new();
    apply_into(
        pair,
        order,
        x.as_slice(),
        out.as_mut_slice(),
        &mut scratch,
        counter,
    );
    Ok(out)
}

/// Column-wise application: column `k` of the result is `(A⊗B)·X[:, k]`.
pub fn kron_matmul(pair: &KronFactorPair, x: &Matrix) -> Result<Matrix> {
    if x.rows() != pair.cols() {
        return Err(Error::shape(
            "kron_matmul",
            format!(
                "factor pair {} needs {} input rows, got {}x{}",
                pair.shape(),
                pair.cols(),
                x.rows(),
                x.cols()
            ),
        ));
    }
    let order = choose_association(pair.shape());
    let mut out = Matrix::zeros(pair.rows(), x.cols());
    let mut col = vec![0.0; x.rows()];
    let mut res = vec![0.0; pair.rows()];
    let mut scratch = Vec::new();
    for k in 0..x.cols() {
        for (r, c) in col.iter_mut().enumerate() {
            *c = x[(r, k)];
        }
        apply_into(pair, order, &col, &mut res, &mut scratch, &mut NoCount);
        for (r, v) in res.iter().enumerate() {
            out[(r, k)] = *v;
        }
    }
    Ok(out)
}

/// Row-wise application: row `t` of the result is `(A⊗B)·X[t, :]`, i.e.
/// `X · (A⊗B)ᵀ`. This is the layout used for sequences of token activations.
pub fn kron_linear_rows(pair: &KronFactorPair, x: &Matrix) -> Result<Matrix> {
    kron_linear_rows_counted(pair, x, &mut NoCount)
}

pub fn kron_linear_rows_counted<C: OpCounter>(
    pair: &KronFactorPair,
    x: &Matrix,
    counter: &mut C,
) -> Result<Matrix> {
    if x.cols() != pair.cols() {
        return Err(Error::shape(
            "kron_linear_rows",
            format!(
                "factor pair {} needs rows of length {}, got {}x{}",
                pair.shape(),
                pair.cols(),
                x.rows(),
                x.cols()
            ),
        ));
    }
    let order = choose_association(pair.shape());
    let mut out = Matrix::zeros(x.rows(), pair.rows());
    let mut scratch = Vec::new();
    for t in 0..x.rows() {
        apply_into(pair, order, x.row(t), out.row_mut(t), &mut scratch, counter);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn pair(a: Matrix, b: Matrix) -> KronFactorPair {
        KronFactorPair::new(a, b)
    }

    fn diag_example() -> KronFactorPair {
        pair(
            Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0]]),
            Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]),
        )
    }

    #[test]
    fn identity_kron_identity() {
        let p = pair(Matrix::identity(2), Matrix::identity(2));
        assert_eq!(kron_product(&p), Matrix::identity(4));
        let x = Matrix::column(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(kron_matvec(&p, &x).unwrap(), x);
    }

    #[test]
    fn block_definition_by_hand() {
        let expected = Matrix::from_rows(&[
            [1.0, 2.0, 0.0, 0.0],
            [3.0, 4.0, 0.0, 0.0],
            [0.0, 0.0, 2.0, 4.0],
            [0.0, 0.0, 6.0, 8.0],
        ]);
        assert_eq!(kron_product(&diag_example()), expected);
    }

    #[test]
    fn matvec_hand_example() {
        let y = kron_matvec(&diag_example(), &Matrix::column(&[1.0; 4])).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 7.0, 6.0, 14.0]);
    }

    #[test]
    fn product_matches_index_oracle() {
        let mut rng = Rng::new(11);
        let a = rng.normal_matrix(3, 2, 1.0);
        let b = rng.normal_matrix(4, 5, 1.0);
        let w = kron_product(&pair(a.clone(), b.clone()));
        assert_eq!(w.shape(), (12, 10));
        for i in 0..3 {
            for j in 0..2 {
                for p in 0..4 {
                    for q in 0..5 {
                        assert_eq!(w[(i * 4 + p, j * 5 + q)], a[(i, j)] * b[(p, q)]);
                    }
                }
            }
        }
    }

    #[test]
    fn matmul_reconstructs_on_identity_and_matches_matvec() {
        let mut rng = Rng::new(5);
        let p = pair(rng.normal_matrix(3, 2, 1.0), rng.normal_matrix(2, 3, 1.0));
        let w = kron_product(&p);
        assert!(
            kron_matmul(&p, &Matrix::identity(6))
                .unwrap()
                .max_abs_diff(&w)
                < 1e-14
        );

        let x = rng.normal_matrix(6, 1, 1.0);
        assert_eq!(kron_matmul(&p, &x).unwrap(), kron_matvec(&p, &x).unwrap());

        let batch = rng.normal_matrix(6, 8, 1.0);
        let y = kron_matmul(&p, &batch).unwrap();
        let oracle = w.matmul(&batch).unwrap();
        assert!(y.rel_diff(&oracle) < 1e-10);

        let rows = kron_linear_rows(&p, &batch.transpose()).unwrap();
        assert!(rows.max_abs_diff(&y.transpose()) < 1e-14);
    }

    #[test]
    fn shape_errors() {
        let p = diag_example();
        assert!(kron_matvec(&p, &Matrix::column(&[1.0; 3])).is_err());
        assert!(kron_matmul(&p, &Matrix::zeros(3, 2)).is_err());
        assert!(kron_linear_rows(&p, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn flop_formula_values() {
        assert_eq!(kron_flops(FactorShape::new(1, 1, 1, 1)), 2);
        assert_eq!(kron_flops(FactorShape::new(384, 384, 2, 2)), 591_360);
        assert_eq!(dense_matvec_flops(1, 1), 1);
        assert_eq!(dense_matvec_flops(768, 768), 1_178_880);
    }

    #[test]
    fn ties_prefer_b_first() {
        let s = FactorShape::new(384, 384, 2, 2);
        let (b, a) = association_costs(s);
        assert_eq!(a, b);
        assert_eq!(choose_association(s), Association::BFirst);
    }

    #[test]
    fn counted_flops_equal_formula_for_both_orders() {
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let dims: Vec<usize> = (0..4).map(|_| rng.int_in(1, 9)).collect();
            let s = FactorShape::new(dims[0], dims[1], dims[2], dims[3]);
            let p = pair(
                rng.normal_matrix(s.m1, s.n1, 1.0),
                rng.normal_matrix(s.m2, s.n2, 1.0),
            );
            let x = rng.normal_matrix(s.cols(), 1, 1.0);
            let (b_cost, a_cost) = association_costs(s);
            for (order, cost) in [(Association::BFirst, b_cost), (Association::AFirst, a_cost)] {
                let mut c = FlopCounter::default();
                kron_matvec_with(&p, &x, order, &mut c).unwrap();
                assert_eq!(c.total(), cost, "{s} {order:?}");
            }
            let mut c = FlopCounter::default();
            kron_matvec_counted(&p, &x, &mut c).unwrap();
            assert_eq!(c.total(), kron_flops(s));
        }
    }

    proptest! {
        #[test]
        fn matvec_equals_reconstruction(m1 in 1usize..7, n1 in 1usize..7, m2 in 1usize..7, n2 in 1usize..7, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let p = pair(rng.normal_matrix(m1, n1, 1.0), rng.normal_matrix(m2, n2, 1.0));
            let x = rng.normal_matrix(n1 * n2, 1, 1.0);
            let fast = kron_matvec(&p, &x).unwrap();
            let slow = kron_product(&p).matmul(&x).unwrap();
            prop_assert!(fast.max_abs_diff(&slow) <= 1e-10 * slow.max_abs().max(1.0));
            for order in [Association::BFirst, Association::AFirst] {
                let y = kron_matvec_with(&p, &x, order, &mut NoCount).unwrap();
                prop_assert!(y.max_abs_diff(&slow) <= 1e-10 * slow.max_abs().max(1.0));
            }
        }

        #[test]
        fn bilinear_in_a(c in -5.0f64..5.0, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let p = pair(rng.normal_matrix(3, 4, 1.0), rng.normal_matrix(2, 3, 1.0));
            let x = rng.normal_matrix(12, 1, 1.0);
            let scaled = pair(p.a.scale(c), p.b.clone());
            let lhs = kron_matvec(&scaled, &x).unwrap();
            let rhs = kron_matvec(&p, &x).unwrap().scale(c);
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12 * rhs.max_abs().max(1.0));
        }
    }
}
