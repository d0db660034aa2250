use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("batch size mismatch: teacher has {teacher} rows, student has {student}")]
    BatchMismatch { teacher: usize, student: usize },

    #[error("{arg} argument has near-zero norm ({norm:e})")]
    ZeroNorm { arg: &'static str, norm: f64 },

    #[error("point with c*|p|^2 = {value} lies on or outside the Poincare ball")]
    OutsideBall { value: f64 },

    #[error("curvature mismatch: {left} vs {right}")]
    CurvatureMismatch { left: f64, right: f64 },

    #[error("invalid curvature {0}: must be finite and > 0")]
    InvalidCurvature(f64),

    #[error("relation normalization mean {0:e} is degenerate")]
    DegenerateNormalization(f64),

    #[error("non-finite value in {context} at ({i}, {j})")]
    NonFinite {
        context: &'static str,
        i: usize,
        j: usize,
    },

    #[error("function returned non-finite value {value} at coordinate {index}")]
    NonFiniteEvaluation { index: usize, value: f64 },

    #[error("no valid triplet in batch (need a class with >= 2 members and another class)")]
    NoValidTriplet,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("{0}")]
    Empty(&'static str),

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
