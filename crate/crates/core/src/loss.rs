//! Losses of the form `L(f, y)` with upstream gradient `p - t`, where `p` is
//! the softmax (cross-entropy) or the raw output (MSE) and `t` the target.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{forward, Network};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `0.5 * |f - t|^2` per sample.
    Mse,
    #[default]
    CrossEntropy,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }
}

/// Class index (one-hot target) or explicit target vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target<'a, T> {
    Class(usize),
    Values(&'a [T]),
}

impl<T: Scalar> Target<'_, T> {
    pub fn to_vec(&self, k: usize) -> Result<Vec<T>> {
        match *self {
            Target::Class(y) => {
                if y >= k {
                    return Err(Error::LabelOutOfRange { label: y, classes: k });
                }
                let mut e = vec![T::zero(); k];
                e[y] = T::one();
                Ok(e)
            }
            Target::Values(v) => {
                if v.len() != k {
                    return Err(Error::DimensionMismatch { expected: k, got: v.len() });
                }
                Ok(v.to_vec())
            }
        }
    }
}

/// Max-shifted softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|z| (*z - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp<T: Scalar>(logits: &[T]) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    m + logits.iter().map(|z| (*z - m).exp()).sum::<T>().ln()
}

/// Loss value and upstream gradient `dL/df` in one pass.
pub fn loss_and_upstream<T: Scalar>(kind: LossKind, logits: &[T], target: Target<'_, T>) -> Result<(T, Vec<T>)> {
    let t = target.to_vec(logits.len())?;
    match kind {
        LossKind::Mse => {
            let r: Vec<T> = logits.iter().zip(&t).map(|(f, y)| *f - *y).collect();
            let v = T::of(0.5) * crate::linalg::dot(&r, &r);
            Ok((v, r))
        }
        LossKind::CrossEntropy => {
            let lse = log_sum_exp(logits);
            let v = logits
                .iter()
                .zip(&t)
                .filter(|(_, y)| **y != T::zero())
                .map(|(z, y)| *y * (lse - *z))
                .sum();
            let p = softmax(logits);
            let r = p.iter().zip(&t).map(|(p, y)| *p - *y).collect();
            Ok((v, r))
        }
    }
}

pub fn loss_value<T: Scalar>(kind: LossKind, logits: &[T], target: Target<'_, T>) -> Result<T> {
    Ok(loss_and_upstream(kind, logits, target)?.0)
}

/// `dL/df`: `softmax(f) - t` for cross-entropy, `f - t` for MSE.
pub fn loss_upstream<T: Scalar>(kind: LossKind, logits: &[T], target: Target<'_, T>) -> Result<Vec<T>> {
    Ok(loss_and_upstream(kind, logits, target)?.1)
}

/// Hessian of the loss in logit space applied to `r`.
pub(crate) fn logit_hessian_apply<T: Scalar>(kind: LossKind, logits: &[T], r: &[T]) -> Vec<T> {
    match kind {
        LossKind::Mse => r.to_vec(),
        LossKind::CrossEntropy => {
            let p = softmax(logits);
            let pr = crate::linalg::dot(&p, r);
            p.iter().zip(r).map(|(p, r)| *p * (*r - pr)).collect()
        }
    }
}

/// Prediction confidence `1 - mean_n |softmax(f(x_n)) - e_{y_n}|_2`.
pub fn confidence<T: Scalar>(net: &Network<T>, ds: &Dataset<T>) -> Result<T> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let terms = crate::par::map(ds.len(), |n| -> Result<T> {
        let (logits, _) = forward(net, ds.input(n))?;
        let p = softmax(&logits);
        let t = Target::Class(ds.label(n)).to_vec(p.len())?;
        let r: Vec<T> = p.iter().zip(&t).map(|(a, b)| *a - *b).collect();
        Ok(crate::linalg::norm2(&r))
    });
    let mut s = T::zero();
    for t in terms {
        s += t?;
    }
    Ok(T::one() - s / T::of(ds.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_and_uniform_cross_entropy() {
        let mut logits = vec![0.0f64; 10];
        logits[0] = 30.0;
        let (v, g) = loss_and_upstream(LossKind::CrossEntropy, &logits, Target::Class(0)).unwrap();
        assert!(v <= 1e-12);
        assert!(g.iter().all(|x| x.abs() < 1e-12));
        let v = loss_value(LossKind::CrossEntropy, &[0.0f64; 10], Target::Class(3)).unwrap();
        assert!((v - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softmax_sums_to_one_under_overflow() {
        let p = softmax(&[1000.0f64, 999.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mse_residual() {
        let (v, g) = loss_and_upstream(LossKind::Mse, &[0.5f64, 2.0], Target::Class(1)).unwrap();
        assert_eq!(v, 0.5 * (0.25 + 1.0));
        assert_eq!(g, vec![0.5, 1.0]);
        let t = [1.5, -1.0];
        let (v, _) = loss_and_upstream(LossKind::Mse, &[0.5f64, 2.0], Target::Values(&t)).unwrap();
        assert_eq!(v, 0.5 * (1.0 + 9.0));
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            loss_value(LossKind::CrossEntropy, &[0.0f64, 1.0], Target::Class(2)),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn upstream_matches_finite_differences() {
        let z = [0.3f64, -1.2, 0.7, 2.0];
        for kind in [LossKind::Mse, LossKind::CrossEntropy] {
            let g = loss_upstream(kind, &z, Target::Class(2)).unwrap();
            for k in 0..4 {
                let h = 1e-6;
                let mut zp = z;
                let mut zm = z;
                zp[k] += h;
                zm[k] -= h;
                let fd = (loss_value(kind, &zp, Target::Class(2)).unwrap() - loss_value(kind, &zm, Target::Class(2)).unwrap()) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6, "{kind:?} {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn logit_hessian_matches_finite_differences() {
        let z = [0.3f64, -1.2, 0.7];
        let r = [0.5, 1.0, -2.0];
        let hr = logit_hessian_apply(LossKind::CrossEntropy, &z, &r);
        let h = 1e-6;
        let zp: Vec<f64> = z.iter().zip(&r).map(|(a, b)| a + h * b).collect();
        let zm: Vec<f64> = z.iter().zip(&r).map(|(a, b)| a - h * b).collect();
        let gp = loss_upstream(LossKind::CrossEntropy, &zp, Target::Class(0)).unwrap();
        let gm = loss_upstream(LossKind::CrossEntropy, &zm, Target::Class(0)).unwrap();
        for k in 0..3 {
            assert!(((gp[k] - gm[k]) / (2.0 * h) - hr[k]).abs() < 1e-8);
        }
    }
}
