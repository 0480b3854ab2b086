use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("auxiliary field is nonzero on the boundary band (max |w| = {max_abs})")]
    BoundaryViolation { max_abs: f64 },

    #[error("step sizes violate tau*sigma*L^2 <= 1 (product {product})")]
    StepSize { product: f64 },

    #[error("iterate became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("dual-ball projection root-find did not converge")]
    RootFind,

    #[error("mollifier support {support} exceeds half the grid ({limit})")]
    KernelTooLarge { support: usize, limit: usize },

    #[error("symmetrised gradient vanishes identically")]
    DegenerateProbe,

    #[error("malformed PGM: {0}")]
    Pgm(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
