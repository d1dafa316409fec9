//! Nearest Kronecker product.
//!
//! `‖W − A⊗B‖_F` equals `‖R(W) − a·bᵀ‖_F` where `R` permutes the entries of
//! `W` so that block `(i, j)` becomes row `i·n1 + j`, and `a`, `b` flatten `A`
//! (row-major) and `B` (column-stacked). The best pair therefore comes from the
//! dominant singular triplet of `R(W)`.

use crate::error::{Error, LastIterate, Result};
use crate::kron::{kron_product, KronFactorPair};
use crate::planner::FactorShape;
use crate::tensor::{dot, Matrix, Rng};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NkpOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NkpOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// `W` rearranged to `(m1·n1)×(m2·n2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RearrangedMatrix {
    pub r: Matrix,
    pub shape: FactorShape,
}

pub fn rearrange(w: &Matrix, shape: FactorShape) -> Result<RearrangedMatrix> {
    if shape.m1 == 0
        || shape.m2 == 0
        || !w.rows().is_multiple_of(shape.m1)
        || shape.m1 * shape.m2 != w.rows()
    {
        return Err(Error::shape(
            "rearrange",
            format!(
                "m1·m2 = {}·{} must equal the {} rows of W",
                shape.m1,
                shape.m2,
                w.rows()
            ),
        ));
    }
    if shape.n1 == 0 || shape.n2 == 0 || shape.n1 * shape.n2 != w.cols() {
        return Err(Error::shape(
            "rearrange",
            format!(
                "n1·n2 = {}·{} must equal the {} cols of W",
                shape.n1,
                shape.n2,
                w.cols()
            ),
        ));
    }
    let FactorShape { m1, n1, m2, n2 } = shape;
    let mut r = Matrix::zeros(m1 * n1, m2 * n2);
    for i in 0..m1 {
        for j in 0..n1 {
            let row = r.row_mut(i * n1 + j);
            for q in 0..n2 {
                for p in 0..m2 {
                    row[q * m2 + p] = w[(i * m2 + p, j * n2 + q)];
                }
            }
        }
    }
    Ok(RearrangedMatrix { r, shape })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingularTriplet {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub iterations: usize,
    /// `‖Mᵀu − σv‖`; `‖Mv − σu‖` is zero by construction.
    pub residual: f64,
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = dot(x, x).sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| dot(m.row(i), v)).collect()
}

fn mat_t_vec(m: &Matrix, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (i, &ui) in u.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(m.row(i)) {
            *o += ui * x;
        }
    }
    out
}

struct PowerState {
    v: Vec<f64>,
    u: Vec<f64>,
    sigma: f64,
    residual: f64,
    /// `Mᵀu`, the unnormalized next `v`.
    next: Vec<f64>,
}

fn random_unit(n: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let mut v = rng.normal_vec(n);
        if normalize(&mut v) > 0.0 {
            return v;
        }
    }
}

/// Evaluates `σ, u, residual` for the current `v`.
fn evaluate(m: &Matrix, v: Vec<f64>) -> PowerState {
    let mut u = mat_vec(m, &v);
    let sigma = normalize(&mut u);
    let next = mat_t_vec(m, &u);
    let residual = next
        .iter()
        .zip(&v)
        .map(|(z, x)| (z - sigma * x).powi(2))
        .sum::<f64>()
        .sqrt();
    PowerState {
        v,
        u,
        sigma,
        residual,
        next,
    }
}

fn start(m: &Matrix, rng: &mut Rng) -> PowerState {
    // A start orthogonal to the row space of a nonzero M has probability zero;
    // retry a few times anyway.
    let mut state = evaluate(m, random_unit(m.cols(), rng));
    for _ in 0..8 {
        if state.sigma > 0.0 {
            break;
        }
        state = evaluate(m, random_unit(m.cols(), rng));
    }
    state
}

fn advance(m: &Matrix, state: PowerState) -> PowerState {
    let mut v = state.next;
    if normalize(&mut v) == 0.0 {
        return PowerState {
            next: v.clone(),
            v,
            ..state
        };
    }
    evaluate(m, v)
}

fn finish(state: PowerState, iterations: usize) -> SingularTriplet {
    SingularTriplet {
        sigma: state.sigma,
        u: state.u,
        v: state.v,
        iterations,
        residual: state.residual,
    }
}

/// Power iteration on `MᵀM` from a seeded random start, stopping once
/// `‖Mᵀu − σv‖ ≤ tol·‖M‖_F`.
pub fn dominant_singular_triplet(
    m: &Matrix,
    tol: f64,
    max_iter: usize,
    rng: &mut Rng,
) -> Result<SingularTriplet> {
    let norm = m.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::Config(
            "dominant_singular_triplet needs a nonzero matrix".into(),
        ));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Config(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let threshold = tol * norm;
    let mut state = start(m, rng);
    for it in 0..max_iter {
        if state.residual <= threshold {
            return Ok(finish(state, it));
        }
        state = advance(m, state);
    }
    if state.residual <= threshold {
        return Ok(finish(state, max_iter));
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        last: Box::new(LastIterate {
            sigma: state.sigma,
            u: state.u,
            v: state.v,
            residual: state.residual,
        }),
    })
}

/// Exactly `steps` power-iteration updates, no convergence test.
pub fn power_iterate(m: &Matrix, steps: usize, rng: &mut Rng) -> SingularTriplet {
    let mut state = start(m, rng);
    for _ in 0..steps {
        state = advance(m, state);
    }
    finish(state, steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NkpResult {
    pub factors: KronFactorPair,
    /// `‖W − A⊗B‖_F`
    pub residual: f64,
    /// Dominant singular value of `R(W)`.
    pub sigma: f64,
    pub iterations: usize,
}

impl NkpResult {
    pub fn relative_residual(&self, w: &Matrix) -> f64 {
        self.residual / w.frobenius_norm().max(f64::MIN_POSITIVE)
    }
}

/// Folds a singular triplet back into factors, splitting `σ` evenly and
/// making the largest-magnitude entry of `A` nonnegative.
fn factors_from_triplet(t: &SingularTriplet, shape: FactorShape) -> KronFactorPair {
    let FactorShape { m1, n1, m2, n2 } = shape;
    let s = t.sigma.sqrt();
    let mut a = Matrix::from_fn(m1, n1, |i, j| s * t.u[i * n1 + j]);
    let mut b = Matrix::from_fn(m2, n2, |p, q| s * t.v[q * m2 + p]);
    let pivot =
        a.as_slice().iter().copied().fold(
            0.0f64,
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
    if pivot < 0.0 {
        a = a.scale(-1.0);
        b = b.scale(-1.0);
    }
    KronFactorPair::new(a, b)
}

fn build_result(w: &Matrix, t: &SingularTriplet, shape: FactorShape) -> NkpResult {
    let factors = factors_from_triplet(t, shape);
    let residual = w
        .sub(&kron_product(&factors))
        .expect("shapes agree")
        .frobenius_norm();
    NkpResult {
        factors,
        residual,
        sigma: t.sigma,
        iterations: t.iterations,
    }
}

/// Globally optimal `A⊗B` of the given shape in Frobenius norm.
pub fn nearest_kronecker(
    w: &Matrix,
    shape: FactorShape,
    opts: NkpOptions,
    rng: &mut Rng,
) -> Result<NkpResult> {
    let r = rearrange(w, shape)?;
    if w.frobenius_norm() == 0.0 {
        return Ok(NkpResult {
            factors: KronFactorPair::new(
                Matrix::zeros(shape.m1, shape.n1),
                Matrix::zeros(shape.m2, shape.n2),
            ),
            residual: 0.0,
            sigma: 0.0,
            iterations: 0,
        });
    }
    let t = dominant_singular_triplet(&r.r, opts.tol, opts.max_iter, rng)?;
    Ok(build_result(w, &t, shape))
}

/// The pair obtained after exactly `steps` power iterations.
pub fn nearest_kronecker_fixed(
    w: &Matrix,
    shape: FactorShape,
    steps: usize,
    rng: &mut Rng,
) -> Result<NkpResult> {
    let r = rearrange(w, shape)?;
    let t = power_iterate(&r.r, steps, rng);
    Ok(build_result(w, &t, shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rearrange_of_product_is_rank_one() {
        let mut rng = Rng::new(2);
        let a = rng.normal_matrix(3, 2, 1.0);
        let b = rng.normal_matrix(2, 4, 1.0);
        let w = kron_product(&KronFactorPair::new(a.clone(), b.clone()));
        let r = rearrange(&w, FactorShape::new(3, 2, 2, 4)).unwrap().r;
        let bvec = b.vec();
        let expected = Matrix::from_fn(6, 8, |row, col| a.as_slice()[row] * bvec.as_slice()[col]);
        assert_eq!(r, expected);
    }

    #[test]
    fn unit_blocks_preserve_norm() {
        let mut rng = Rng::new(4);
        let w = rng.normal_matrix(3, 5, 1.0);
        let r = rearrange(&w, FactorShape::new(3, 5, 1, 1)).unwrap().r;
        assert_eq!(r.shape(), (15, 1));
        assert_eq!(r.as_slice(), w.as_slice());
        assert_eq!(r.frobenius_norm(), w.frobenius_norm());
    }

    #[test]
    fn rearrange_index_oracle() {
        let mut rng = Rng::new(8);
        let w = rng.normal_matrix(6, 6, 1.0);
        let s = FactorShape::new(3, 2, 2, 3);
        let r = rearrange(&w, s).unwrap().r;
        for row in 0..w.rows() {
            for col in 0..w.cols() {
                let (i, p) = (row / 2, row % 2);
                let (j, q) = (col / 3, col % 3);
                assert_eq!(r[(i * 2 + j, q * 2 + p)], w[(row, col)]);
            }
        }
    }

    #[test]
    fn incompatible_shape_errors() {
        let w = Matrix::zeros(6, 6);
        let err = rearrange(&w, FactorShape::new(4, 2, 1, 3))
            .unwrap_err()
            .to_string();
        assert!(err.contains("rows"), "{err}");
        let err = rearrange(&w, FactorShape::new(3, 4, 2, 1))
            .unwrap_err()
            .to_string();
        assert!(err.contains("cols"), "{err}");
    }

    #[test]
    fn diagonal_triplet() {
        let m = Matrix::from_rows(&[[3.0, 0.0], [0.0, 1.0]]);
        let t = dominant_singular_triplet(&m, 1e-12, 10_000, &mut Rng::new(0)).unwrap();
        assert!((t.sigma - 3.0).abs() < 1e-10);
        assert!((t.u[0].abs() - 1.0).abs() < 1e-10 && t.u[1].abs() < 1e-5);
        assert!((t.v[0].abs() - 1.0).abs() < 1e-10 && t.v[1].abs() < 1e-5);
    }

    #[test]
    fn rank_one_triplet_exact() {
        let p = [1.0, -2.0, 2.0];
        let q = [3.0, 4.0];
        let m = Matrix::from_fn(3, 2, |i, j| p[i] * q[j]);
        let t = dominant_singular_triplet(&m, 1e-12, 100, &mut Rng::new(1)).unwrap();
        assert!((t.sigma - 15.0).abs() < 1e-12);
        assert!(t.residual < 1e-12);
    }

    #[test]
    fn non_convergence_carries_iterate() {
        let mut rng = Rng::new(3);
        let m = rng.normal_matrix(6, 6, 1.0);
        match dominant_singular_triplet(&m, 1e-15, 1, &mut rng) {
            Err(Error::NonConvergence { iterations, last }) => {
                assert_eq!(iterations, 1);
                assert_eq!(last.v.len(), 6);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_matrix_gives_zero_factors() {
        let w = Matrix::zeros(4, 6);
        let r = nearest_kronecker(
            &w,
            FactorShape::new(2, 3, 2, 2),
            NkpOptions::default(),
            &mut Rng::new(0),
        )
        .unwrap();
        assert_eq!(r.residual, 0.0);
        assert_eq!(r.factors.a.max_abs(), 0.0);
        assert_eq!(r.factors.b.max_abs(), 0.0);
    }

    #[test]
    fn sign_normalized() {
        let mut rng = Rng::new(12);
        let w = rng.normal_matrix(6, 4, 1.0);
        let r = nearest_kronecker(
            &w,
            FactorShape::new(3, 2, 2, 2),
            NkpOptions::default(),
            &mut rng,
        )
        .unwrap();
        let a = r.factors.a.as_slice();
        let pivot = a
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        assert!(pivot >= 0.0);
        assert!((r.factors.a.frobenius_norm() - r.sigma.sqrt()).abs() < 1e-10);
        assert!((r.factors.b.frobenius_norm() - r.sigma.sqrt()).abs() < 1e-10);
    }
}
