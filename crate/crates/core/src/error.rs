use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NonFiniteInput { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar((usize, usize)),
    #[error("parameter `{0}` has no gradient")]
    UninitializedGradient(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    IndexOutOfRange(usize, usize, usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("invalid candidate labels: {0}")]
    InvalidCandidates(String),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("K = {k} exceeds the class count D = {d}")]
    KTooLarge { k: usize, d: usize },
    #[error("K must be at least 2, got {0}")]
    KTooSmall(usize),
    #[error("no annotator has accuracy 1.0")]
    NoPerfectAnnotator,
    #[error("annotator accuracy {0} is outside [0, 1]")]
    InvalidAccuracy(f64),
    #[error("rho = {0} is outside [0, 1]")]
    InvalidRho(f64),
    #[error("semantic order must be a permutation of 0..{0}")]
    InvalidOrder(usize),
    #[error("at least two classes are required")]
    TooFewClasses,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("k = {k} exceeds the number of points {points}")]
    KExceedsPoints { k: usize, points: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("AMSE threshold must be positive, got {0}")]
    InvalidAlpha(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CauseError {
    #[error("delta must lie in (0, 1), got {0}")]
    InvalidDelta(f64),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("sample {0} has no causal mask")]
    MissingCausalMask(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Cause(#[from] CauseError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoremError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("grid step must divide 1 and lie in (0, 1], got {0}")]
    InvalidGridStep(f64),
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
