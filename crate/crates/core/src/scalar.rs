use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Floating-point scalar the model math is generic over.
///
/// Covers `f32` and `f64`; everything downstream of the model
/// (training, mining, evaluation) is instantiated at [`crate::Real`].
pub trait Scalar: NdFloat + FromPrimitive + std::iter::Sum {}

impl<T> Scalar for T where T: NdFloat + FromPrimitive + std::iter::Sum {}
