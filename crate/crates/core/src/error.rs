use thiserror::Error;

/// Errors raised across the solver stack.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is numerically singular (pivot {pivot:e} at column {column})")]
    SingularMatrix { column: usize, pivot: f64 },
    #[error("constraint normals are linearly dependent (normal {index})")]
    DependentNormals { index: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("signature has a zero state at constraint {index}")]
    AmbiguousSignature { index: usize },
    #[error("constraint tag out of range: {0}")]
    InvalidTag(String),
    #[error("no inactive constraint is crossed along the direction")]
    NoCrossing,
    #[error("could not perturb the start point into a full-dimensional region")]
    DegenerateStart,
    #[error("no descent or feasible null-space direction before reaching a vertex ({active} active)")]
    NumericalStall { active: usize },
    #[error("degenerate vertex: {0}")]
    Degenerate(String),
    #[error("strictly descending edge without a crossing (derivative {derivative:e})")]
    UnboundedEdge { derivative: f64 },
    #[error("iteration cap of {0} reached")]
    MaxIterations(usize),
    #[error("series too short: need {needed}, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("too few well-conditioned Aitken triples ({accepted} accepted)")]
    IllConditioned { accepted: usize },
    #[error("no exponential decay window qualifies")]
    NoExponentialPhase,
    #[error("point is within the finite-difference reach of a region boundary (constraint {index})")]
    RegionBoundaryTooClose { index: usize },
    #[error("three or more surfaces meet at ({x}, {y})")]
    Degenerate2D { x: f64, y: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
