//! Two-scale finite element solver for periodic porous elastic media with
//! frictionless self-contact in the micropores.

pub mod check;
pub mod error;
pub mod fem;
pub mod homog;
pub mod io;
pub mod macrosolver;
pub mod mesh;
pub mod microsolver;
pub mod oracle;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Real, Scalar};
pub use tensor::ElasticTensor;
