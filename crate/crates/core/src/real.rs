use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::LinalgScalar;
use num_traits::{Float, FromPrimitive};

/// Floating-point element type of the encoder graph.
///
/// Training runs in `f32`; the gradient oracle re-runs the same graph in `f64`.
pub trait Real:
    Float + FromPrimitive + LinalgScalar + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + Debug + Display + 'static
{
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Real for f32 {}
impl Real for f64 {}
