//! Scalar abstraction for the numeric kernels.
//!
//! The small dense kernels (constitutive tensor, complementarity solvers)
//! are generic over the floating point type; the mesh and FE pipeline are
//! fixed to [`Real`] (`f64`).

/// Floating point scalar usable in the generic kernels: f32 or f64.
pub trait Scalar: num_traits::Float + nalgebra::RealField + num_traits::FromPrimitive {
    fn from_f64_lossy(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite literal")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Scalar type used by the mesh, FE and solver pipeline.
pub type Real = f64;
