use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A density denominator fell below the evaluation floor; the query point
    /// is far outside the support of the estimate.
    #[error("density underflow at x = {x}: query point is outside the effective support")]
    DensityUnderflow { x: f64 },

    /// Both emission densities vanished at the same observation, so the
    /// observation is impossible under the current model.
    #[error("emission underflow at position {index} (x = {x}): both states assign zero density")]
    EmissionUnderflow { index: usize, x: f64 },

    /// Exhaustive path enumeration was requested for a sequence too long to
    /// enumerate.
    #[error("instance of length {n} exceeds the enumeration limit ({max})")]
    InstanceTooLarge { n: usize, max: usize },

    /// The input carries no usable spread or signal.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// The posterior mass of the out-of-control state collapsed to zero, so
    /// the nonparametric density has no weight to distribute.
    #[error("out-of-control posterior mass collapsed (total = {total:.3e})")]
    WeightCollapse { total: f64 },

    /// The EM loop hit its iteration cap while the log-likelihood was still
    /// moving by more than ten times the convergence tolerance.
    #[error("EM did not converge in {iterations} iterations (last relative change {oscillation:.3e})")]
    NonConvergence { iterations: usize, oscillation: f64 },

    /// Every mixture component was pruned during an update.
    #[error("all mixture components collapsed during the update")]
    ComponentCollapse,

    /// An oracle density was requested for a state vector with no non-null
    /// positions.
    #[error("no out-of-control positions: the oracle density is undefined")]
    NoSignalPoints,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Bandwidth selection failed at every grid point.
    #[error("every bandwidth failed: {0}")]
    AllBandwidthsFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
