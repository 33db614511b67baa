use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): negative extent")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("degenerate zero-area box is not a valid {role}")]
    DegenerateBox { role: &'static str },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op} expects a scalar tensor, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    #[error("index misalignment: expected {expected} entries, got {got}")]
    IndexMisalignment { expected: usize, got: usize },

    #[error("stride {stride} does not divide image size {image_size}")]
    StrideMismatch { stride: usize, image_size: usize },

    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),

    #[error("non-finite intermediate in {0}")]
    NonFinite(&'static str),

    #[error("non-finite {component} loss at iteration {iteration}")]
    NonFiniteLoss { component: &'static str, iteration: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("config line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("need at least {need} detections for rank correlation, got {got}")]
    TooFewDetections { need: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
