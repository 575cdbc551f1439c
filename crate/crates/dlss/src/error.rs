//! Error type shared across the crate.

/// Failure modes surfaced by solver entry points.
///
/// Shape mismatches and invalid grid parameters are programmer errors and
/// panic instead; these variants cover conditions reachable with valid code
/// on hard data.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A field that must be strictly positive is not.
    #[error("state is not strictly positive: value {value:e} at slot {index}")]
    NonPositiveState { index: usize, value: f64 },

    /// Requested an energy variant outside the dimension it is defined for.
    #[error("energy variant {variant} is not defined in {dim}D")]
    UnsupportedVariant { variant: &'static str, dim: usize },

    /// The weighted Poisson problem is solvable only for mean-zero data.
    #[error("right-hand side has nonzero mean {mean:e}")]
    NotMeanZero { mean: f64 },

    #[error("iterative solve stalled after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// Newton damping hit its floor without finding an acceptable update.
    #[error("line search stalled at residual {residual:e}")]
    LineSearchStalled { residual: f64 },

    #[error("linear solve failed: {reason}")]
    LinearSolveFailure { reason: String },

    /// Context wrapper naming the trajectory step that failed.
    #[error("time step {step} failed")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

/// Shared positivity gate; `!(v > 0.0)` also catches NaN.
pub(crate) fn ensure_strictly_positive(values: &[f64]) -> Result<(), Error> {
    for (index, &value) in values.iter().enumerate() {
        if !(value > 0.0) {
            return Err(Error::NonPositiveState { index, value });
        }
    }
    Ok(())
}
