use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("evaluation radius must be positive, got {0}")]
    NonpositiveRadius(f64),

    #[error("polynomial has a non-integral winding {0} and is not single valued")]
    MultiValued(String),

    #[error("singular weight gamma_{index} = {value} must exceed -1")]
    WeightOutOfRange { index: usize, value: String },

    #[error("rank must be at least 1")]
    EmptyWeights,

    #[error("lambda_{index} = {value} must be positive")]
    NonpositiveLambda { index: usize, value: f64 },

    #[error("coefficient c_{i}{j} is nonzero but its slot is not resonant")]
    NonResonantCoefficient { i: usize, j: usize },

    #[error("coefficient slot c_{i}{j} does not exist for rank {n}")]
    InvalidSlot { i: usize, j: usize, n: usize },

    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("lambda product constraint violated: relative defect {0:e}")]
    ConstraintViolated(f64),

    #[error("tau ladder identity fails at level {level}: relative defect {defect:e}")]
    LadderClosureFailure { level: usize, defect: f64 },

    #[error("tau function F_{level} is not positive ({value}) at r = {r}, theta = {theta}")]
    NonpositiveTau {
        level: usize,
        value: f64,
        r: f64,
        theta: f64,
    },

    #[error("component index {index} outside 1..={n}")]
    InvalidComponent { index: usize, n: usize },

    #[error("quadrature did not converge: {0}")]
    QuadratureNonconvergent(String),

    #[error("invalid parameter tag: {0}")]
    InvalidParameterTag(String),

    #[error("frequencies must be positive and strictly increasing")]
    NonincreasingFrequencies,

    #[error("expected {expected} angles, got {got}")]
    AngleCount { expected: usize, got: usize },

    #[error("node ordering violated for powers {high} > {low}: {detail}")]
    OrderingViolation {
        high: String,
        low: String,
        detail: String,
    },

    #[error("design requires N > s > 1 > epsilon > 0 and positive angle step")]
    InvalidDesignConfig,

    #[error("conditioning failure: cond(M) = {cond_m:e}, cond(M1) = {cond_m1:e}, ceiling {ceiling:e}")]
    ConditioningFailure {
        cond_m: f64,
        cond_m1: f64,
        ceiling: f64,
    },

    #[error("newton iteration diverged at step {0}")]
    NewtonDivergence(usize),

    #[error("jacobian is singular or too badly conditioned (cond = {0:e})")]
    SingularJacobian(f64),

    #[error("sample has no value at node {0}")]
    MissingSample(String),

    #[error("points coincide")]
    CoincidentPoints,

    #[error("point lies outside the open disk")]
    PointOutsideDisk,

    #[error("invalid estimate parameters: {0}")]
    InvalidEstimate(String),

    #[error("invalid configuration at {path}: {message}")]
    ConfigInvalid { path: String, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ConfigInvalid {
            path: path.into(),
            message: message.into(),
        }
    }
}
