//! Dense tensor engine: kernels, a reverse-mode tape, finite-difference
//! checking, seeded initialization and parameter storage.

pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod ops;
pub mod params;
pub mod pattern;
pub mod rng;
pub mod tape;
pub mod tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use gradcheck::{check_inputs, check_params, finite_diff_grad, rel_err};
pub use params::{Bound, Init, ParamGrads, ParamId, ParamStore};
pub use pattern::Pattern;
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Floating point element type. Tests and gradient checks run in `f64`;
/// `f32` is available for throughput measurements.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub(crate) fn all_finite<T: Real>(xs: &[T]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

pub(crate) fn ensure_finite<T: Real>(op: &'static str, xs: &[T]) -> crate::Result<()> {
    if all_finite(xs) {
        Ok(())
    } else {
        Err(crate::Error::Numeric { op })
    }
}
