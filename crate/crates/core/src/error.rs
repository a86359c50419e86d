use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("scene graph has no objects")]
    EmptyGraph,

    #[error("malformed attribute string {raw:?}: {reason}")]
    MalformedAttribute { raw: String, reason: String },

    #[error("unknown anatomical category {category} (have {known})")]
    UnknownCategory { category: usize, known: usize },

    #[error("bounding box has zero area: [{x0}, {y0}, {x1}, {y1}]")]
    DegenerateBox { x0: f64, y0: f64, x1: f64, y1: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("memory top-k {gamma} out of range for {slots} slots")]
    GammaOutOfRange { gamma: usize, slots: usize },

    #[error("length mismatch in {context}: {left} vs {right}")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("line {line}: invalid JSON: {message}")]
    ParseError { line: usize, message: String },

    #[error("line {line}: invalid field {field:?}: {message}")]
    SchemaError {
        line: usize,
        field: &'static str,
        message: String,
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("non-finite loss component {component:?} at step {step}")]
    NonFiniteLoss { component: &'static str, step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
