use super::{axpy, dot, exact_eig_symmetric, normalize, LinearOperator, Mat};
use crate::error::{Error, Result};
use crate::rng;
use crate::Scalar;

const MAX_RESTARTS: usize = 3;
const BREAKDOWN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LanczosResult<T> {
    pub lambda_max: T,
    pub lambda_min: T,
    /// Smallest Ritz value with `|lambda| > zero_tol * max(1, |lambda_max|)`.
    pub lambda_min_nonzero: Option<T>,
    /// All Ritz values, ascending.
    pub ritz: Vec<T>,
    pub steps: usize,
    pub restarts: usize,
}

fn orthogonalize<T: Scalar>(w: &mut [T], basis: &[Vec<T>]) {
    // Two passes of classical Gram-Schmidt.
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, w);
            axpy(-c, q, w);
        }
    }
}

/// Extreme eigenvalues of a symmetric operator from `k` Lanczos steps with
/// full reorthogonalization. On breakdown (`beta ~ 0`) the recurrence is
/// restarted from a fresh random vector orthogonal to the current basis, at
/// most three times; after that the Ritz values of the basis built so far
/// are returned.
pub fn lanczos_extremes<T, O>(op: &O, k: usize, zero_tol: f64, seed: u64) -> Result<LanczosResult<T>>
where
    T: Scalar,
    O: LinearOperator<T> + ?Sized,
{
    let n = op.rows();
    if op.cols() != n || n == 0 {
        return Err(Error::ShapeMismatch(format!(
            "Lanczos needs a square non-empty operator, got {}x{}",
            op.rows(),
            op.cols()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("Lanczos steps k={k} must lie in 1..={n}")));
    }

    let mut basis: Vec<Vec<T>> = Vec::with_capacity(k);
    let mut alpha: Vec<T> = Vec::with_capacity(k);
    let mut beta: Vec<T> = Vec::with_capacity(k);
    let mut restarts = 0;
    let mut anorm = T::zero();

    let mut q = rng::gaussian_vec::<T>(&mut rng::stream(seed, "lanczos", 0), n);
    normalize(&mut q);

    loop {
        let mut w = op.apply(&q);
        if !super::all_finite(&w) {
            return Err(Error::NonFinite("Lanczos operator output".into()));
        }
        let a = dot(&q, &w);
        basis.push(q);
        alpha.push(a);
        orthogonalize(&mut w, &basis);
        let j = basis.len();
        if j == k {
            break;
        }
        let b = normalize(&mut w);
        anorm = anorm.max(a.abs() + b + beta.last().copied().unwrap_or_else(T::zero));
        if b > T::of(BREAKDOWN_TOL) * anorm && b > T::zero() {
            beta.push(b);
            q = w;
            continue;
        }
        // Invariant subspace reached: restart orthogonally to it.
        if restarts == MAX_RESTARTS {
            log::debug!("Lanczos stopped after {j} steps: restart budget exhausted");
            break;
        }
        restarts += 1;
        let mut fresh = rng::gaussian_vec::<T>(&mut rng::stream(seed, "lanczos", restarts as u64), n);
        orthogonalize(&mut fresh, &basis);
        if normalize(&mut fresh) <= T::of(BREAKDOWN_TOL) {
            break;
        }
        beta.push(T::zero());
        q = fresh;
    }

    let m = alpha.len();
    let t = Mat::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            T::zero()
        }
    });
    let ritz = exact_eig_symmetric(&t)?;
    let lambda_min = ritz[0];
    let lambda_max = ritz[m - 1];
    let cut = T::of(zero_tol) * lambda_max.abs().max(T::one());
    let lambda_min_nonzero = ritz.iter().copied().find(|l| l.abs() > cut);
    Ok(LanczosResult {
        lambda_max,
        lambda_min,
        lambda_min_nonzero,
        ritz,
        steps: m,
        restarts,
    })
}
