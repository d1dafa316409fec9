#![allow(clippy::needless_range_loop)]

use kronekit_core::kron::{kron_product, KronFactorPair};
use kronekit_core::nkp::{dominant_singular_triplet, nearest_kronecker, rearrange, NkpOptions};
use kronekit_core::{FactorShape, Matrix, Rng};
use proptest::prelude::*;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_eigenvalues(s: &Matrix) -> Vec<f64> {
    let n = s.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| s.row(i).to_vec()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-28 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - sn * akq;
                    a[k][q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - sn * aqk;
                    a[q][k] = sn * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Rank by Gaussian elimination with partial pivoting.
fn rank(m: &Matrix, tol: f64) -> usize {
    let (rows, cols) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..rows).map(|i| m.row(i).to_vec()).collect();
    let scale = m.max_abs().max(1.0);
    let mut r = 0;
    for c in 0..cols {
        if r == rows {
            break;
        }
        let piv = (r..rows)
            .max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))
            .unwrap();
        if a[piv][c].abs() <= tol * scale {
            continue;
        }
        a.swap(r, piv);
        for i in r + 1..rows {
            let f = a[i][c] / a[r][c];
            for j in c..cols {
                a[i][j] -= f * a[r][j];
            }
        }
        r += 1;
    }
    r
}

fn low_rank(rng: &mut Rng, rows: usize, cols: usize, r: usize) -> Matrix {
    if r == 0 {
        return Matrix::zeros(rows, cols);
    }
    rng.normal_matrix(rows, r, 1.0)
        .matmul(&rng.normal_matrix(r, cols, 1.0))
        .unwrap()
}

#[test]
fn power_iteration_matches_jacobi() {
    let mut rng = Rng::new(11);
    for _ in 0..40 {
        let (r, c) = (rng.int_in(1, 12), rng.int_in(1, 12));
        let m = rng.normal_matrix(r, c, 1.0);
        let gram = m.t_matmul(&m).unwrap();
        let top = jacobi_eigenvalues(&gram)
            .into_iter()
            .fold(f64::MIN, f64::max)
            .sqrt();
        let t = dominant_singular_triplet(&m, 1e-12, 100_000, &mut rng).unwrap();
        assert!(
            (t.sigma - top).abs() <= 1e-8 * top,
            "sigma {} vs {}",
            t.sigma,
            top
        );
    }
}

#[test]
fn nkp_error_equals_tail_spectrum() {
    // ‖W − A⊗B‖² = ‖R(W)‖² − σ₁².
    let mut rng = Rng::new(12);
    for _ in 0..20 {
        let s = FactorShape::new(
            rng.int_in(1, 5),
            rng.int_in(1, 5),
            rng.int_in(1, 5),
            rng.int_in(1, 5),
        );
        let w = rng.normal_matrix(s.rows(), s.cols(), 1.0);
        let r = rearrange(&w, s).unwrap().r;
        let gram = r.t_matmul(&r).unwrap();
        let top = jacobi_eigenvalues(&gram)
            .into_iter()
            .fold(f64::MIN, f64::max);
        let opts = NkpOptions {
            tol: 1e-12,
            max_iter: 200_000,
        };
        let res = nearest_kronecker(&w, s, opts, &mut rng).unwrap();
        let expected = (w.frobenius_norm().powi(2) - top).max(0.0).sqrt();
        assert!(
            (res.residual - expected).abs() <= 1e-6 * w.frobenius_norm(),
            "{} vs {expected}",
            res.residual
        );
    }
}

#[test]
fn nkp_recovers_exact_products() {
    let mut rng = Rng::new(13);
    for _ in 0..50 {
        let s = FactorShape::new(
            rng.int_in(1, 8),
            rng.int_in(1, 8),
            rng.int_in(1, 8),
            rng.int_in(1, 8),
        );
        let pair = KronFactorPair::new(
            rng.normal_matrix(s.m1, s.n1, 1.0),
            rng.normal_matrix(s.m2, s.n2, 1.0),
        );
        let w = kron_product(&pair);
        let res = nearest_kronecker(&w, s, NkpOptions::default(), &mut rng).unwrap();
        assert!(res.relative_residual(&w) < 1e-9);
        assert!(kron_product(&res.factors).rel_diff(&w) < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_is_multiplicative(seed in any::<u64>(), m1 in 1usize..6, n1 in 1usize..6, m2 in 1usize..6, n2 in 1usize..6, ra in 0usize..6, rb in 0usize..6) {
        let mut rng = Rng::new(seed);
        let ra = ra.min(m1.min(n1));
        let rb = rb.min(m2.min(n2));
        let pair = KronFactorPair::new(low_rank(&mut rng, m1, n1, ra), low_rank(&mut rng, m2, n2, rb));
        let tol = 1e-9;
        prop_assert_eq!(rank(&pair.a, tol), ra);
        prop_assert_eq!(rank(&pair.b, tol), rb);
        prop_assert_eq!(rank(&kron_product(&pair), tol), ra * rb);
    }

    #[test]
    fn rearranged_product_has_rank_one(seed in any::<u64>(), m1 in 1usize..6, n1 in 1usize..6, m2 in 1usize..6, n2 in 1usize..6) {
        let mut rng = Rng::new(seed);
        let s = FactorShape::new(m1, n1, m2, n2);
        let pair = KronFactorPair::new(rng.normal_matrix(m1, n1, 1.0), rng.normal_matrix(m2, n2, 1.0));
        let r = rearrange(&kron_product(&pair), s).unwrap().r;
        prop_assert_eq!(rank(&r, 1e-9), 1);
    }
}
