//! Small dense reference solvers (Jacobi methods). Used as oracles in tests
//! and by the bound certificates, which work on explicit Jacobians.

use super::{dot, Mat};
use crate::error::{Error, Result};
use crate::Scalar;

const MAX_SWEEPS: usize = 100;
const SWEEP_TOL: f64 = 1e-12;

/// Singular values in descending order (one-sided Jacobi).
pub fn dense_svd_oracle<T: Scalar>(m: &Mat<T>) -> Result<Vec<T>> {
    if !m.is_finite() {
        return Err(Error::NonFinite("matrix passed to dense_svd_oracle".into()));
    }
    // Rotate the columns of the tall orientation; store them contiguously.
    let tall = if m.rows() >= m.cols() { m.clone() } else { m.transpose() };
    let (len, ncols) = (tall.rows(), tall.cols());
    let mut cols: Vec<Vec<T>> = (0..ncols)
        .map(|j| (0..len).map(|i| tall.get(i, j)).collect())
        .collect();
    let tol = T::tol_floor(SWEEP_TOL);

    let mut done = ncols < 2;
    for _ in 0..MAX_SWEEPS {
        if done {
            break;
        }
        done = true;
        for p in 0..ncols {
            for q in p + 1..ncols {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == T::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                done = false;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (a, b) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (x, y) = (*a, *b);
                    *a = c * x - s * y;
                    *b = s * x + c * y;
                }
            }
        }
    }
    if !done {
        return Err(Error::NoConvergence(MAX_SWEEPS));
    }
    let mut sv: Vec<T> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(sv)
}

/// Spectral norm of a dense matrix; zero for empty matrices.
pub fn spectral_norm_dense<T: Scalar>(m: &Mat<T>) -> Result<T> {
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(T::zero());
    }
    Ok(dense_svd_oracle(m)?[0])
}

/// Eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi).
pub fn exact_eig_symmetric<T: Scalar>(m: &Mat<T>) -> Result<Vec<T>> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::ShapeMismatch(format!(
            "exact_eig_symmetric needs a square matrix, got {}x{}",
            n,
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("matrix passed to exact_eig_symmetric".into()));
    }
    let mut a = m.clone();
    a.symmetrize();
    let tol = T::tol_floor(SWEEP_TOL);
    let total = a.frobenius();

    let off = |a: &Mat<T>| {
        let mut s = T::zero();
        for i in 0..n {
            for j in 0..i {
                s += a.get(i, j) * a.get(i, j);
            }
        }
        (s + s).sqrt()
    };

    let mut sweeps = 0;
    while off(&a) > tol * total {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence(MAX_SWEEPS));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == T::zero() {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (apq + apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                // A <- J^T A J with J the (p, q) rotation.
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut ev: Vec<T> = (0..n).map(|i| a.get(i, i)).collect();
    ev.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    Ok(ev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        Mat::from_vec(rows, cols, rng::gaussian_vec(&mut rng::stream(seed, "t", 0), rows * cols))
    }

    #[test]
    fn identity_and_diagonal() {
        assert_eq!(dense_svd_oracle(&Mat::<f64>::identity(5)).unwrap(), vec![1.0; 5]);
        let sv = dense_svd_oracle(&Mat::diag(&[1.0, -4.0, 2.0])).unwrap();
        assert_eq!(sv, vec![4.0, 2.0, 1.0]);
        let ev = exact_eig_symmetric(&Mat::diag(&[3.0, -1.0, 2.0])).unwrap();
        assert_eq!(ev, vec![-1.0, 2.0, 3.0]);
    }

    #[test]
    fn gram_eigenvalues_are_squared_singular_values() {
        for seed in 0..5 {
            let a = random(7, 4, seed);
            let sv = dense_svd_oracle(&a).unwrap();
            let mut ev = exact_eig_symmetric(&a.transpose().matmul(&a)).unwrap();
            ev.reverse();
            for (s, e) in sv.iter().zip(&ev) {
                assert!((s * s - e).abs() <= 1e-9 * (1.0 + e.abs()), "{s} {e}");
            }
        }
    }

    #[test]
    fn wide_matrices_use_the_transpose() {
        let a = random(3, 9, 4);
        let a_sv = dense_svd_oracle(&a).unwrap();
        let at_sv = dense_svd_oracle(&a.transpose()).unwrap();
        assert_eq!(a_sv.len(), 3);
        for (x, y) in a_sv.iter().zip(&at_sv) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn eigenvalues_preserve_trace() {
        let b = random(6, 6, 9);
        let s = b.transpose().matmul(&b);
        let ev = exact_eig_symmetric(&s).unwrap();
        assert!((ev.iter().sum::<f64>() - s.trace()).abs() < 1e-10);
        assert!(ev.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn rejects_nan() {
        let mut m = Mat::<f64>::identity(2);
        m.set(0, 1, f64::NAN);
        assert!(matches!(dense_svd_oracle(&m), Err(Error::NonFinite(_))));
    }
}
