use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("eigensolver did not converge (best residual {residual:e})")]
    NoConvergence { residual: f64 },

    #[error("degenerate direction")]
    DegenerateDirection,

    #[error("degenerate activations")]
    DegenerateActivations,

    #[error("collapsed layer {0}")]
    CollapsedLayer(usize),

    #[error("token {token} out of vocabulary (size {vocab})")]
    OutOfVocab { token: u32, vocab: usize },

    #[error("non-finite loss at layer {layer}")]
    NonFiniteLoss { layer: usize },

    #[error("non-finite parameters after {phase} step {step}")]
    Diverged { phase: String, step: usize },

    #[error("underfit base model: retain accuracy {accuracy:.3} below floor {floor:.3}")]
    Underfit { accuracy: f64, floor: f64 },

    #[error("invalid config at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("missing phase `{0}` in metrics")]
    MissingPhase(String),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload in {0}")]
    Truncated(String),

    #[error("row-count mismatch: layer {layer} has {rows} rows, expected {expected}")]
    RowMismatch {
        layer: u32,
        rows: u32,
        expected: u32,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error classes, used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite(_)
            | Error::NoConvergence { .. }
            | Error::DegenerateDirection
            | Error::DegenerateActivations
            | Error::CollapsedLayer(_)
            | Error::NonFiniteLoss { .. }
            | Error::Diverged { .. }
            | Error::Underfit { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }

    /// Short machine-readable code for JSON error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyInput => "empty_input",
            Error::Shape(_) => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::NotSymmetric(_) => "not_symmetric",
            Error::NoConvergence { .. } => "no_convergence",
            Error::DegenerateDirection => "degenerate_direction",
            Error::DegenerateActivations => "degenerate_activations",
            Error::CollapsedLayer(_) => "collapsed_layer",
            Error::OutOfVocab { .. } => "out_of_vocab",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Diverged { .. } => "diverged",
            Error::Underfit { .. } => "underfit",
            Error::Config { .. } => "config",
            Error::Invalid(_) => "invalid",
            Error::MissingPhase(_) => "missing_phase",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Truncated(_) => "truncated_payload",
            Error::RowMismatch { .. } => "row_mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
