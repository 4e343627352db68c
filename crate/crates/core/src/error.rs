use thiserror::Error;

/// Errors raised by mesh construction, assembly, the solvers and the experiment driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    Geometry(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("ellipticity violated: smallest eigenvalue {min_eig:.6e} below beta = {beta:.6e} at {location}")]
    Ellipticity { min_eig: f64, beta: f64, location: String },
    #[error("non-symmetric diffusion matrix at {0}")]
    NonSymmetric(String),
    #[error("surface field is not tangential at boundary node {node} (normal component {normal:.3e})")]
    NonTangential { node: usize, normal: f64 },
    #[error("noise tree error: {0}")]
    Tree(String),
    #[error("explicit convection unstable: dt = {dt:.4e} exceeds h/(2|B|) = {limit:.4e}")]
    Stability { dt: f64, limit: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { expected, got })
    }
}
