use thiserror::Error;

/// Errors raised by operator construction, state preparation and the
/// evolution engines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("size error: {0}")]
    Size(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("operator is not Hermitian (max deviation {deviation:e})")]
    NotHermitian { deviation: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no admissible rotating-frame root: f_r candidates {roots:?}")]
    NoValidRoot { roots: Vec<f64> },

    #[error("krylov exponential failed to converge: {0}")]
    KrylovNonConvergence(String),

    #[error("integrator failure: {0}")]
    Integrator(String),

    #[error("witness undefined: mean spin denominator {0:e} too small")]
    UndefinedWitness(f64),

    #[error("vanishing mean spin")]
    VanishingSpin,

    #[error("no interior minimum of V_s on the scanned range up to r = {r_max}; extend the range")]
    NoInteriorMinimum { r_max: f64 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
}

pub type Result<T> = std::result::Result<T, Error>;
