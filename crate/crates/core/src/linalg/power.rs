use serde::{Deserialize, Serialize};

use super::{dot, norm2, normalize, LinearOperator};
use crate::error::{Error, Result};
use crate::rng;
use crate::Scalar;

const RESTARTS: u64 = 3;
const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerConfig {
    /// Relative tolerance on the increments of the estimate.
    pub rel_tol: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            max_iters: 1000,
            seed: 0,
        }
    }
}

impl PowerConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rel_tol.is_nan() || self.rel_tol <= 0.0 {
            return Err(Error::Config(format!("rel_tol must be > 0, got {}", self.rel_tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerResult<T> {
    pub sigma: T,
    pub iters: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymPowerResult<T> {
    /// Signed eigenvalue of largest magnitude.
    pub lambda: T,
    pub eigvec: Vec<T>,
    pub iters: usize,
    pub converged: bool,
}

fn converged<T: Scalar>(prev: T, cur: T, rel_tol: f64) -> bool {
    (cur - prev).abs() <= T::of(rel_tol) * cur.abs().max(T::of(SIGMA_FLOOR))
}

/// Draws a unit start vector whose image under `apply` is non-zero, trying
/// up to three reseeded restarts. `None` means the operator annihilated
/// every start, which callers treat as the zero operator.
fn start_vector<T: Scalar>(
    dim: usize,
    seed: u64,
    tag: &str,
    apply: impl Fn(&[T]) -> Vec<T>,
) -> Result<Option<(Vec<T>, Vec<T>)>> {
    for attempt in 0..=RESTARTS {
        let mut v = rng::gaussian_vec::<T>(&mut rng::stream(seed, tag, attempt), dim);
        normalize(&mut v);
        let image = apply(&v);
        if !super::all_finite(&image) {
            return Err(Error::NonFinite("operator output".into()));
        }
        if norm2(&image) > T::zero() {
            return Ok(Some((v, image)));
        }
    }
    Ok(None)
}

/// Largest singular value via the alternating `u`/`v` power iteration:
/// `u <- A v / |A v|`, `v <- A^T u / |A^T u|`, `sigma = u^T A v = |A^T u|`.
pub fn power_method<T, O>(op: &O, cfg: &PowerConfig) -> Result<PowerResult<T>>
where
    T: Scalar,
    O: LinearOperator<T> + ?Sized,
{
    cfg.validate()?;
    if op.rows() == 0 || op.cols() == 0 {
        return Err(Error::ShapeMismatch("operator with an empty dimension".into()));
    }
    let Some((_, mut u)) = start_vector(op.cols(), cfg.seed, "power", |v| op.apply(v))? else {
        return Ok(PowerResult {
            sigma: T::zero(),
            iters: 0,
            converged: true,
        });
    };

    let mut sigma_prev = T::nan();
    for t in 1..=cfg.max_iters {
        if normalize(&mut u) == T::zero() {
            return Ok(PowerResult {
                sigma: T::zero(),
                iters: t,
                converged: true,
            });
        }
        let mut v = op.apply_adjoint(&u);
        let sigma = normalize(&mut v);
        if !sigma.is_finite() {
            return Err(Error::NonFinite("power iteration".into()));
        }
        if t > 1 && converged(sigma_prev, sigma, cfg.rel_tol) {
            return Ok(PowerResult {
                sigma,
                iters: t,
                converged: true,
            });
        }
        sigma_prev = sigma;
        u = op.apply(&v);
    }
    Ok(PowerResult {
        sigma: sigma_prev,
        iters: cfg.max_iters,
        converged: false,
    })
}

/// Rayleigh-quotient power iteration for a symmetric operator; returns the
/// signed eigenvalue of largest magnitude.
pub fn sym_power_method<T, O>(op: &O, cfg: &PowerConfig) -> Result<SymPowerResult<T>>
where
    T: Scalar,
    O: LinearOperator<T> + ?Sized,
{
    cfg.validate()?;
    let n = op.rows();
    if n == 0 || op.cols() != n {
        return Err(Error::ShapeMismatch(format!(
            "symmetric operator must be square and non-empty, got {}x{}",
            op.rows(),
            op.cols()
        )));
    }
    check_symmetric(op, cfg.seed)?;

    let Some((mut v, mut w)) = start_vector(n, cfg.seed, "sym-power", |v| op.apply(v))? else {
        return Ok(SymPowerResult {
            lambda: T::zero(),
            eigvec: vec![T::zero(); n],
            iters: 0,
            converged: true,
        });
    };
    let mut lambda_prev = T::nan();
    for t in 1..=cfg.max_iters {
        let lambda = dot(&v, &w);
        if !lambda.is_finite() {
            return Err(Error::NonFinite("symmetric power iteration".into()));
        }
        if t > 1 && converged(lambda_prev, lambda, cfg.rel_tol) {
            return Ok(SymPowerResult {
                lambda,
                eigvec: v,
                iters: t,
                converged: true,
            });
        }
        lambda_prev = lambda;
        if normalize(&mut w) == T::zero() {
            return Ok(SymPowerResult {
                lambda: T::zero(),
                eigvec: v,
                iters: t,
                converged: true,
            });
        }
        v = w;
        w = op.apply(&v);
    }
    Ok(SymPowerResult {
        lambda: lambda_prev,
        eigvec: v,
        iters: cfg.max_iters,
        converged: false,
    })
}

fn check_symmetric<T: Scalar, O: LinearOperator<T> + ?Sized>(op: &O, seed: u64) -> Result<()> {
    let n = op.rows();
    let u: Vec<T> = rng::gaussian_vec(&mut rng::stream(seed, "sym-check-u", 0), n);
    let v: Vec<T> = rng::gaussian_vec(&mut rng::stream(seed, "sym-check-v", 0), n);
    let au = op.apply(&u);
    let av = op.apply(&v);
    let gap = (dot(&u, &av) - dot(&au, &v)).abs();
    let scale = norm2(&u) * norm2(&av) + norm2(&au) * norm2(&v);
    if gap > T::tol_floor(1e-8) * scale.max(T::min_positive_value()) {
        return Err(Error::PreconditionViolated(format!(
            "operator is not symmetric (relative gap {gap})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{Mat, SymOperator};

    #[test]
    fn identity_and_diagonal() {
        let cfg = PowerConfig::default();
        let r = power_method(&Mat::<f64>::identity(4), &cfg).unwrap();
        assert!((r.sigma - 1.0).abs() < 1e-9);
        assert!(r.converged);
        let r: PowerResult<f64> = power_method(&Mat::diag(&[3.0, 1.0]), &cfg).unwrap();
        assert!((r.sigma - 3.0).abs() < 1e-6);
    }

    #[test]
    fn zero_operator_returns_zero() {
        let r = power_method(&Mat::<f64>::zeros(3, 5), &PowerConfig::default()).unwrap();
        assert_eq!(r.sigma, 0.0);
        assert!(r.converged);
        let s = sym_power_method(&Mat::<f64>::zeros(4, 4), &PowerConfig::default()).unwrap();
        assert_eq!(s.lambda, 0.0);
        assert!(s.converged);
    }

    #[test]
    fn negative_dominant_eigenvalue() {
        let r: SymPowerResult<f64> = sym_power_method(&Mat::diag(&[-5.0, 2.0]), &PowerConfig::default()).unwrap();
        assert!((r.lambda + 5.0).abs() < 1e-6, "{}", r.lambda);
        assert!(r.converged);
    }

    #[test]
    fn rejects_bad_config_and_asymmetry() {
        let bad = PowerConfig {
            rel_tol: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            power_method(&Mat::<f64>::identity(2), &bad),
            Err(Error::Config(_))
        ));
        let a = Mat::from_vec(2, 2, vec![1.0, 5.0, 0.0, 1.0]);
        let op = SymOperator::new(2, |v: &[f64]| a.matvec(v));
        assert!(matches!(
            sym_power_method(&op, &PowerConfig::default()),
            Err(Error::PreconditionViolated(_))
        ));
    }

    #[test]
    fn runs_in_single_precision() {
        let m = Mat::<f32>::diag(&[2.0, 0.5, 0.25]);
        let r = power_method(&m, &PowerConfig::default()).unwrap();
        assert!((r.sigma - 2.0).abs() < 1e-5);
    }

    #[test]
    fn deterministic_per_seed() {
        let m = Mat::<f64>::from_fn(6, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let cfg = PowerConfig::default().with_seed(11);
        let a = power_method(&m, &cfg).unwrap();
        let b = power_method(&m, &cfg).unwrap();
        assert_eq!(a.sigma.to_bits(), b.sigma.to_bits());
    }
}
