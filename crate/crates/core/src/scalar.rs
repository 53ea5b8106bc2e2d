//! Scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar the engine computes in: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` constant.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn to64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// Tolerance floor used by iterative solvers that were tuned for `f64`.
    #[inline]
    fn tol_floor(tol: f64) -> Self {
        let eps = Self::epsilon().to64() * 4.0;
        Self::of(tol.max(eps))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
