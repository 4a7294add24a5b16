use thiserror::Error;

/// Library-wide error type. Variants carry enough context to act on the
/// failure without re-running the computation.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-contract input (bad dimensions, empty grids,
    /// unparseable expressions, non-symmetric matrices, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A requested enumeration would overflow index arithmetic.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A user-supplied evaluator returned a non-finite value.
    #[error("evaluation failed at {where_}: {what}")]
    Evaluation { where_: String, what: String },

    /// A quadrature or extrapolation did not reach the requested tolerance.
    /// The best available estimate is included.
    #[error("tolerance not met: requested {requested:e}, achieved {achieved:e} (estimate {estimate})")]
    ToleranceNotMet {
        requested: f64,
        achieved: f64,
        estimate: f64,
    },

    /// A regularization or iteration sequence failed to settle.
    #[error("did not converge: {0}")]
    Convergence(String),

    /// Residuals were identically zero, so no remainder exponent exists.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// A quadratic form had the wrong signature for the requested operation.
    /// Eigenvalues are reported for diagnosis.
    #[error("bad signature: {context} (eigenvalues {eigenvalues:?})")]
    Signature {
        context: String,
        eigenvalues: Vec<f64>,
    },

    /// An operation was called outside its stated precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn evaluation(where_: impl Into<String>, what: impl Into<String>) -> Self {
        Error::Evaluation {
            where_: where_.into(),
            what: what.into(),
        }
    }
}
