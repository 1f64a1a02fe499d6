use thiserror::Error;

/// Crate-wide error type. Numerical routines never return NaN silently;
/// anything that cannot produce a finite, meaningful answer surfaces here.
#[derive(Debug, Error)]
pub enum Error {
    #[error("expression error: {0}")]
    Expr(#[from] ExprError),

    #[error("model error: {0}")]
    Model(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("eigenvalue iteration failed to converge: {0}")]
    NonConvergence(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv format error: {0}")]
    CsvFormat(String),
}

/// Errors raised while parsing or evaluating a scalar field expression.
/// Offsets are byte positions into the original source string.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },

    #[error("`{name}` expects {expected} argument(s), got {got} (at byte {offset})")]
    Arity {
        name: String,
        expected: usize,
        got: usize,
        offset: usize,
    },

    #[error("domain error in `{op}`: {message}")]
    EvalDomain { op: &'static str, message: String },

    #[error("non-finite result in `{op}`")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, Error>;
