use thiserror::Error;

pub type Result<T> = std::result::Result<T, SofError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SofError {
    #[error("field `{field}`: expected {expected_rows}x{expected_cols}, found {rows}x{cols}")]
    Dimension {
        field: &'static str,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },

    #[error("field `{field}`: {reason}")]
    Malformed { field: &'static str, reason: String },

    #[error("gain has non-finite entries")]
    NonFiniteGain,

    #[error("closed loop is not stabilizing (spectral radius {spectral_radius})")]
    UnstableClosedLoop { spectral_radius: f64 },

    #[error("eigenvalue iteration did not converge within {iterations} iterations")]
    EigenNonConvergence { iterations: usize },

    #[error("singular linear system in {context}")]
    Singular { context: &'static str },

    #[error("Lyapunov residual {residual:e} exceeds tolerance (relative to solution norm)")]
    LyapunovResidual { residual: f64 },

    #[error("Riccati iteration did not converge within {iterations} iterations")]
    RiccatiNonConvergence { iterations: usize },

    #[error("output correlation is ill conditioned (sigma_min/sigma_max = {ratio:e})")]
    IllConditionedOutputCorrelation { ratio: f64 },

    #[error("matrix `{name}` is not positive definite")]
    NotPositiveDefinite { name: &'static str },

    #[error("landscape constants unavailable: {reason}")]
    ConstantsUnavailable { reason: String },

    #[error("no sample inside the sublevel set after {attempts} proposals")]
    SamplingFailed { attempts: usize },

    #[error("iterate {iteration} is not stabilizing (spectral radius {spectral_radius}); gain {gain:?}")]
    UnstableIterate {
        iteration: usize,
        spectral_radius: f64,
        gain: Vec<f64>,
    },

    #[error("C must be square and full rank (rank {rank}, n = {n}, d = {d})")]
    RankDeficientC { rank: usize, n: usize, d: usize },

    #[error("reference point is not a strict local minimum (smallest Hessian eigenvalue {l})")]
    NotALocalMinimum { l: f64 },

    #[error("initial error {r0} is outside the local basin radius {r_bar}")]
    OutsideBasin { r0: f64, r_bar: f64 },

    /// `last_finite` is the last step with finite values, `None` if the
    /// first step already overflowed.
    #[error("rollout became non-finite (last finite step: {last_finite:?})")]
    DivergentRollout { last_finite: Option<usize> },

    #[error("{divergent} of {total} perturbed rollouts diverged")]
    EstimationUnreliable { divergent: usize, total: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
