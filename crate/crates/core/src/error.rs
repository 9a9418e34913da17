use thiserror::Error;

use crate::kamflow::StepRecord;

pub type Result<T> = std::result::Result<T, Error>;

/// Which family of small-divisor condition a violation belongs to.
///
/// `1` is the pure rotation family, `2` couples one elliptic angle, `3` and `4`
/// couple two angles with equal and opposite signs respectively.
pub type ConditionFamily = u8;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate sec: theta[{j}] = {theta} is too close to pi/2 + k*pi")]
    DegenerateSec { j: usize, theta: f64 },

    #[error("non-resonance violated for elliptic angles: {0}")]
    AngleResonance(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("{context}: Newton did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonDiverged {
        context: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("{context}: singular Jacobian")]
    SingularJacobian { context: &'static str },

    #[error("small divisor violation: k = {k:?}, l = {l}, i = {i:?}, j = {j:?}, condition {condition}, margin {margin:e}")]
    DivisorViolation {
        k: Vec<i32>,
        l: i64,
        i: Option<usize>,
        j: Option<usize>,
        condition: ConditionFamily,
        margin: f64,
    },

    #[error("normalization diverged (residual {residual:e})")]
    NormalizationDiverged { residual: f64 },

    #[error("norm did not contract: eps {eps:e} -> {eps_next:e}")]
    NormDidNotContract { eps: f64, eps_next: f64 },

    #[error("division guard: {0}")]
    DivisionGuard(&'static str),

    #[error("rank condition unmet up to nbar = {nbar_max}; worst xi = {worst_xi:?}")]
    RankConditionUnmet { nbar_max: usize, worst_xi: Vec<f64> },

    #[error("derivative floor violated at x = {x}: |g^(m)| = {value:e} < {floor:e}")]
    DerivativeFloorViolated { x: f64, value: f64, floor: f64 },

    #[error("grid too coarse: {points} points (need at least {required})")]
    GridTooCoarse { points: usize, required: usize },

    #[error("state has not converged")]
    NotConverged,

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("KAM iteration aborted at step {step}: {source}")]
    Aborted {
        step: usize,
        #[source]
        source: Box<Error>,
        trace: Vec<StepRecord>,
    },

    #[error("pipeline `{label}` failed: {source}")]
    Pipeline {
        label: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures that mean "this parameter value does not carry a
    /// torus" rather than a usage problem.
    pub fn is_dynamical(&self) -> bool {
        match self {
            Error::DivisorViolation { .. }
            | Error::NewtonDiverged { .. }
            | Error::SingularJacobian { .. }
            | Error::NormalizationDiverged { .. }
            | Error::NormDidNotContract { .. }
            | Error::NotConverged
            | Error::AngleResonance(_) => true,
            Error::Aborted { source, .. } | Error::Pipeline { source, .. } => source.is_dynamical(),
            _ => false,
        }
    }
}
