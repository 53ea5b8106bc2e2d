//! Dense primitives and matrix-free spectral estimators.

mod dense;
mod lanczos;
mod oracle;
mod power;

pub use dense::Mat;
pub use lanczos::{lanczos_extremes, LanczosResult};
pub use oracle::{dense_svd_oracle, exact_eig_symmetric, spectral_norm_dense};
pub use power::{power_method, sym_power_method, PowerConfig, PowerResult, SymPowerResult};

use crate::rng;
use crate::Scalar;

/// A linear map `R^cols -> R^rows` known only through its action and the
/// action of its adjoint.
pub trait LinearOperator<T: Scalar> {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn apply(&self, v: &[T]) -> Vec<T>;
    fn apply_adjoint(&self, u: &[T]) -> Vec<T>;
}

/// Operator assembled from a pair of closures.
pub struct FnOperator<A, B> {
    rows: usize,
    cols: usize,
    apply: A,
    adjoint: B,
}

impl<A, B> FnOperator<A, B> {
    pub fn new(rows: usize, cols: usize, apply: A, adjoint: B) -> Self {
        Self {
            rows,
            cols,
            apply,
            adjoint,
        }
    }
}

impl<T, A, B> LinearOperator<T> for FnOperator<A, B>
where
    T: Scalar,
    A: Fn(&[T]) -> Vec<T>,
    B: Fn(&[T]) -> Vec<T>,
{
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        (self.apply)(v)
    }
    fn apply_adjoint(&self, u: &[T]) -> Vec<T> {
        (self.adjoint)(u)
    }
}

/// Square self-adjoint operator from a single closure (Hessians, covariances).
pub struct SymOperator<A> {
    dim: usize,
    apply: A,
}

impl<A> SymOperator<A> {
    pub fn new(dim: usize, apply: A) -> Self {
        Self { dim, apply }
    }
}

impl<T, A> LinearOperator<T> for SymOperator<A>
where
    T: Scalar,
    A: Fn(&[T]) -> Vec<T>,
{
    fn rows(&self) -> usize {
        self.dim
    }
    fn cols(&self) -> usize {
        self.dim
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        (self.apply)(v)
    }
    fn apply_adjoint(&self, u: &[T]) -> Vec<T> {
        (self.apply)(u)
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

#[inline]
pub fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

#[inline]
pub fn scale<T: Scalar>(alpha: T, x: &mut [T]) {
    x.iter_mut().for_each(|v| *v *= alpha);
}

/// Normalizes in place and returns the previous norm. Zero vectors are left alone.
pub fn normalize<T: Scalar>(x: &mut [T]) -> T {
    let n = norm2(x);
    if n > T::zero() {
        scale(T::one() / n, x);
    }
    n
}

pub fn all_finite<T: Scalar>(x: &[T]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Relative adjoint-consistency residual
/// `|<u, A v> - <A^T u, v>| / (|u| |A v| + |A^T u| |v|)` for random `u`, `v`.
pub fn adjoint_residual<T: Scalar, O: LinearOperator<T> + ?Sized>(op: &O, seed: u64) -> T {
    let v: Vec<T> = rng::gaussian_vec(&mut rng::stream(seed, "adjoint-v", 0), op.cols());
    let u: Vec<T> = rng::gaussian_vec(&mut rng::stream(seed, "adjoint-u", 0), op.rows());
    let av = op.apply(&v);
    let atu = op.apply_adjoint(&u);
    let lhs = dot(&u, &av);
    let rhs = dot(&atu, &v);
    let scale = norm2(&u) * norm2(&av) + norm2(&atu) * norm2(&v);
    if scale == T::zero() {
        return (lhs - rhs).abs();
    }
    (lhs - rhs).abs() / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_helpers() {
        let mut y = vec![1.0, 2.0];
        axpy(2.0, &[1.0, -1.0], &mut y);
        assert_eq!(y, vec![3.0, 0.0]);
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]), 11.0);
        let mut z = vec![3.0, 4.0];
        assert_eq!(normalize(&mut z), 5.0);
        assert!((norm2(&z) - 1.0f64).abs() < 1e-15);
        let mut zero = vec![0.0f64; 3];
        assert_eq!(normalize(&mut zero), 0.0);
    }

    #[test]
    fn matrix_operator_is_adjoint_consistent() {
        let m = Mat::<f64>::from_fn(5, 3, |i, j| (i as f64 + 1.0) * 0.3 - j as f64);
        assert!(adjoint_residual(&m, 3) < 1e-14);
    }
}
