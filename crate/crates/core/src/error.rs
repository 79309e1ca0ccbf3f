use thiserror::Error;

use crate::NodeId;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("plane extent must be positive and finite, got {width} x {height}")]
    BadExtent { width: f64, height: f64 },
    #[error("topology needs at least one node")]
    Empty,
    #[error("node {node} at ({x}, {y}) lies outside the plane")]
    OutOfBounds { node: usize, x: f64, y: f64 },
    #[error("node {node} shares its position with an earlier node")]
    DuplicatePosition { node: usize },
    #[error("lambda_min {min} exceeds lambda_max {max}")]
    BadLambda { min: usize, max: usize },
    #[error("zone radii need alpha > 2, got {alpha}")]
    ZoneExponent { alpha: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Error)]
pub enum SinrError {
    #[error("received power is undefined at distance 0")]
    ZeroDistance,
    #[error("noise at node {node} must be finite and non-negative, got {level}")]
    BadNoise { node: usize, level: f64 },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is transmitting and cannot sense the channel")]
    SensingWhileSending(NodeId),
}

/// Raised when a jamming strategy overspends; the run cannot continue.
#[derive(Debug, Error)]
pub enum BudgetViolation {
    #[error("round {round}: node {node} spent {spent} in window starting at {window_start}, cap {cap}")]
    Overspend { round: u64, node: NodeId, spent: f64, cap: f64, window_start: u64 },
    #[error("round {round}: noise at node {node} is {level}")]
    BadLevel { round: u64, node: NodeId, level: f64 },
    #[error("round {round}: uniform adversary emitted non-uniform noise")]
    NotUniform { round: u64 },
    #[error("round {round}: strategy produced {got} entries for {expected} nodes")]
    WrongLength { round: u64, got: usize, expected: usize },
}

/// Configuration failure, tagged with the offending key path.
#[derive(Debug, Error)]
#[error("{key}: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn invalid(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self { key: key.into(), message: message.into() }
    }
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("truncated input: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("round {round}, node {node}: {message}")]
    Record { round: usize, node: usize, message: String },
    #[error("header: {0}")]
    Header(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Sinr(#[from] SinrError),
    #[error(transparent)]
    Budget(#[from] BudgetViolation),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
