use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("contact pairing error: {0}")]
    Pairing(String),

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("material error: {0}")]
    Material(String),

    #[error("factorization error: {0}")]
    Factorization(String),

    #[error("dimension/contract mismatch: {0}")]
    Contract(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e}): {context}")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        context: String,
        history: Vec<f64>,
    },

    #[error("active set cycling detected at iteration {iteration}: {context}")]
    Cycling { iteration: usize, context: String },

    #[error("step size error: {0}")]
    StepSize(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
