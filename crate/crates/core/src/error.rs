use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-finite {what} at q = {q:?}")]
    NonFiniteDerivative { what: &'static str, q: Vec<f64> },

    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("field {requested} does not match model kind {actual}")]
    FieldMismatch {
        requested: &'static str,
        actual: &'static str,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("mass matrix is not positive definite at q = {q:?}")]
    MassMatrixNotPositiveDefinite { q: Vec<f64> },

    #[error("constraint matrix has rank {rank} < {rows} at q = {q:?}")]
    RankDeficientConstraints { rank: usize, rows: usize, q: Vec<f64> },

    #[error("multiplier system is singular (condition estimate {condition:e})")]
    SingularMultiplierSystem { condition: f64 },

    #[error("state is off the constraint manifold (residual {residual:e} > {tol:e})")]
    ConstraintViolation { residual: f64, tol: f64 },

    #[error("Euler-angle chart singularity: beta = {beta} is within {margin} of +/-pi/2")]
    ChartSingularity { beta: f64, margin: f64 },

    #[error("adaptive step {h:e} fell below h_min = {h_min:e} at t = {t}")]
    StepUnderflow { t: f64, h: f64, h_min: f64 },

    #[error("guard {guard_id} lost its sign change while refining [{t_a}, {t_b}]")]
    BracketLost { guard_id: usize, t_a: f64, t_b: f64 },

    #[error("reset at t = {t} leaves the constraint manifold (residual {residual:e})")]
    ResetOffConstraint { t: f64, residual: f64 },

    #[error("base point {q:?} lies outside region {region}")]
    RegionViolation { region: usize, q: Vec<f64> },

    #[error("post-impact base point {q:?} matches {matches} regions")]
    RegionAmbiguous { q: Vec<f64>, matches: usize },

    #[error("transfer from region {from} to region {to} is undefined: {reason}")]
    TransferUndefined {
        from: usize,
        to: usize,
        reason: String,
    },

    #[error("bad scenario parameters: {0}")]
    BadParameters(String),

    #[error("unknown scenario '{name}' (available: {available})")]
    UnknownScenario { name: String, available: String },

    #[error("trajectories are not comparable: {0}")]
    IncomparableHorizons(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
