use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("packing infeasible: {balls} balls of radius {radius} cover more than 90% of the box")]
    PackingInfeasible { balls: usize, radius: f64 },
    #[error("no legal circle: {0}")]
    NoLegalCircle(String),
    #[error("operation `{op}` is undefined for task kind {kind}")]
    WrongTaskKind { op: &'static str, kind: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("noise level t = {t} outside [{min}, 1]")]
    NoiseLevel { t: f64, min: f64 },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
