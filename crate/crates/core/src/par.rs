//! Deterministic parallel reductions.
//!
//! Work is split into fixed-size chunks whose boundaries do not depend on the
//! number of threads; each chunk accumulates in ascending item order and the
//! chunk partials are combined in ascending chunk order. Results are therefore
//! bit-identical for any pool size.

use rayon::prelude::*;

use crate::Scalar;

const CHUNK: usize = 16;

/// `sum_i f(i)` over `0..n` into a `dim`-vector; `f` accumulates into the
/// buffer. The first error in index order wins.
pub fn try_ordered_vec_sum<T, E, F>(n: usize, dim: usize, f: F) -> Result<Vec<T>, E>
where
    T: Scalar,
    E: Send,
    F: Fn(usize, &mut [T]) -> Result<(), E> + Sync,
{
    let partials: Vec<Result<Vec<T>, E>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![T::zero(); dim];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                f(i, &mut acc)?;
            }
            Ok(acc)
        })
        .collect();
    let mut out = vec![T::zero(); dim];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p?) {
            *o += v;
        }
    }
    Ok(out)
}

/// Order-preserving parallel map.
pub fn map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Sequential sum of a slice in index order.
pub fn sum_in_order<T: Scalar>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |a, b| a + *b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independent_of_pool_size() {
        let f = |i: usize, acc: &mut [f64]| {
            acc[0] += (i as f64).sin() * 1e-3;
            acc[1] += 1.0 / (1.0 + i as f64);
            Ok::<_, ()>(())
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| try_ordered_vec_sum(1000, 2, f).unwrap());
        let b = four.install(|| try_ordered_vec_sum(1000, 2, f).unwrap());
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }
}
