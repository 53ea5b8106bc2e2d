//! Per-layer linear primitives shared by the forward, tangent, adjoint and
//! gradient passes.

use super::{LayerPlan, LayerSpec, Shape, CONV_KERNEL, POOL_WINDOW};
use crate::linalg::dot;
use crate::Scalar;

/// Valid output range for kernel offset `k` along an axis of length `n`
/// (input index `i + k - 1` must stay inside `[0, n)`).
#[inline]
fn span(k: usize, n: usize) -> (usize, usize) {
    (1usize.saturating_sub(k), (n + 1).saturating_sub(k).min(n))
}

/// `out += W x` (no bias).
pub(crate) fn linear_apply<T: Scalar>(plan: &LayerPlan, w: &[T], x: &[T], out: &mut [T]) {
    match plan.spec {
        LayerSpec::Dense { input, output, .. } => {
            for o in 0..output {
                out[o] += dot(&w[o * input..(o + 1) * input], x);
            }
        }
        LayerSpec::Conv2d { in_ch, out_ch, .. } => {
            let Shape { h, w: wd, .. } = plan.in_shape;
            let hw = h * wd;
            for o in 0..out_ch {
                let dst = &mut out[o * hw..(o + 1) * hw];
                for c in 0..in_ch {
                    let src = &x[c * hw..(c + 1) * hw];
                    let kern = &w[(o * in_ch + c) * CONV_KERNEL * CONV_KERNEL..][..CONV_KERNEL * CONV_KERNEL];
                    for ky in 0..CONV_KERNEL {
                        let (i0, i1) = span(ky, h);
                        for kx in 0..CONV_KERNEL {
                            let wv = kern[ky * CONV_KERNEL + kx];
                            if wv == T::zero() {
                                continue;
                            }
                            let (j0, j1) = span(kx, wd);
                            for i in i0..i1 {
                                let ii = i + ky - 1;
                                let d = &mut dst[i * wd + j0..i * wd + j1];
                                let s = &src[ii * wd + j0 + kx - 1..ii * wd + j1 + kx - 1];
                                for (a, b) in d.iter_mut().zip(s) {
                                    *a += wv * *b;
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => unreachable!("linear_apply on a pooling layer"),
    }
}

/// `out += W^T g`.
pub(crate) fn linear_adjoint<T: Scalar>(plan: &LayerPlan, w: &[T], g: &[T], out: &mut [T]) {
    match plan.spec {
        LayerSpec::Dense { input, output, .. } => {
            for o in 0..output {
                let go = g[o];
                if go == T::zero() {
                    continue;
                }
                for (a, b) in out.iter_mut().zip(&w[o * input..(o + 1) * input]) {
                    *a += go * *b;
                }
            }
        }
        LayerSpec::Conv2d { in_ch, out_ch, .. } => {
            let Shape { h, w: wd, .. } = plan.in_shape;
            let hw = h * wd;
            for o in 0..out_ch {
                let src = &g[o * hw..(o + 1) * hw];
                for c in 0..in_ch {
                    let dst = &mut out[c * hw..(c + 1) * hw];
                    let kern = &w[(o * in_ch + c) * CONV_KERNEL * CONV_KERNEL..][..CONV_KERNEL * CONV_KERNEL];
                    for ky in 0..CONV_KERNEL {
                        let (i0, i1) = span(ky, h);
                        for kx in 0..CONV_KERNEL {
                            let wv = kern[ky * CONV_KERNEL + kx];
                            if wv == T::zero() {
                                continue;
                            }
                            let (j0, j1) = span(kx, wd);
                            for i in i0..i1 {
                                let ii = i + ky - 1;
                                let s = &src[i * wd + j0..i * wd + j1];
                                let d = &mut dst[ii * wd + j0 + kx - 1..ii * wd + j1 + kx - 1];
                                for (a, b) in d.iter_mut().zip(s) {
                                    *a += wv * *b;
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => unreachable!("linear_adjoint on a pooling layer"),
    }
}

/// `dw += scale * dL/dW` for upstream `g` at the pre-activation and layer input `x`.
pub(crate) fn weight_grad<T: Scalar>(plan: &LayerPlan, g: &[T], x: &[T], scale: T, dw: &mut [T]) {
    match plan.spec {
        LayerSpec::Dense { input, output, .. } => {
            for o in 0..output {
                let go = g[o] * scale;
                if go == T::zero() {
                    continue;
                }
                for (a, b) in dw[o * input..(o + 1) * input].iter_mut().zip(x) {
                    *a += go * *b;
                }
            }
        }
        LayerSpec::Conv2d { in_ch, out_ch, .. } => {
            let Shape { h, w: wd, .. } = plan.in_shape;
            let hw = h * wd;
            for o in 0..out_ch {
                let go = &g[o * hw..(o + 1) * hw];
                for c in 0..in_ch {
                    let src = &x[c * hw..(c + 1) * hw];
                    let kern = &mut dw[(o * in_ch + c) * CONV_KERNEL * CONV_KERNEL..][..CONV_KERNEL * CONV_KERNEL];
                    for ky in 0..CONV_KERNEL {
                        let (i0, i1) = span(ky, h);
                        for kx in 0..CONV_KERNEL {
                            let (j0, j1) = span(kx, wd);
                            let mut acc = T::zero();
                            for i in i0..i1 {
                                let ii = i + ky - 1;
                                acc += dot(
                                    &go[i * wd + j0..i * wd + j1],
                                    &src[ii * wd + j0 + kx - 1..ii * wd + j1 + kx - 1],
                                );
                            }
                            kern[ky * CONV_KERNEL + kx] += scale * acc;
                        }
                    }
                }
            }
        }
        _ => unreachable!("weight_grad on a pooling layer"),
    }
}

pub(crate) fn bias_grad<T: Scalar>(plan: &LayerPlan, g: &[T], scale: T, db: &mut [T]) {
    let per = plan.out_shape.spatial();
    for (o, slot) in db.iter_mut().enumerate() {
        let s: T = g[o * per..(o + 1) * per].iter().copied().sum();
        *slot += scale * s;
    }
}

pub(crate) fn add_bias<T: Scalar>(plan: &LayerPlan, b: &[T], z: &mut [T]) {
    let per = plan.out_shape.spatial();
    for (o, bo) in b.iter().enumerate() {
        z[o * per..(o + 1) * per].iter_mut().for_each(|v| *v += *bo);
    }
}

/// Max pooling; ties go to the lowest spatial index. Returns outputs and the
/// flat input index selected for every output cell.
pub(crate) fn maxpool_forward<T: Scalar>(plan: &LayerPlan, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let Shape { c, h, w } = plan.in_shape;
    let Shape { h: oh, w: ow, .. } = plan.out_shape;
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = T::neg_infinity();
                for i in oi * POOL_WINDOW..((oi + 1) * POOL_WINDOW).min(h) {
                    for j in oj * POOL_WINDOW..((oj + 1) * POOL_WINDOW).min(w) {
                        let k = ch * h * w + i * w + j;
                        if best == usize::MAX || x[k] > best_v {
                            best = k;
                            best_v = x[k];
                        }
                    }
                }
                out.push(best_v);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

pub(crate) fn gather<T: Scalar>(idx: &[usize], v: &[T]) -> Vec<T> {
    idx.iter().map(|&k| v[k]).collect()
}

pub(crate) fn scatter<T: Scalar>(idx: &[usize], g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for (&k, gv) in idx.iter().zip(g) {
        out[k] += *gv;
    }
    out
}

pub(crate) fn gap_forward<T: Scalar>(shape: Shape, x: &[T]) -> Vec<T> {
    let per = shape.spatial();
    let inv = T::one() / T::of(per as f64);
    (0..shape.c)
        .map(|c| x[c * per..(c + 1) * per].iter().copied().sum::<T>() * inv)
        .collect()
}

pub(crate) fn gap_adjoint<T: Scalar>(shape: Shape, g: &[T]) -> Vec<T> {
    let per = shape.spatial();
    let inv = T::one() / T::of(per as f64);
    let mut out = Vec::with_capacity(shape.numel());
    for gv in g.iter().take(shape.c) {
        out.extend(std::iter::repeat_n(*gv * inv, per));
    }
    out
}
