//! Scalar abstraction for the numeric core.
//!
//! Everything that touches model parameters or feature values is generic
//! over [`Scalar`], so the same engine runs in `f32` or `f64`. The crate
//! root exports `f64` aliases, which is what the CLI and the audit
//! pipeline use (checkpoints store 64-bit floats).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use rand::distributions::uniform::SampleUniform;

/// Floating-point scalar type accepted by the numeric core.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Sum
    + SampleUniform
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Widen to `f64` for reports and checkpoints.
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("scalar representable as f64")
    }

    /// Narrowing conversion from `f64`; rounds for `f32`.
    fn from_f64_lossy(value: f64) -> Self {
        FromPrimitive::from_f64(value).expect("f64 convertible to scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
