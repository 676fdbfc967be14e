use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Newton did not contract below tolerance within the iteration budget.
    /// The multirate engine reacts by rejecting the sub-step and halving.
    #[error("Newton solver failed to converge after {iters} iterations (last update {last_update:.3e})")]
    NewtonDiverged { iters: usize, last_update: f64 },

    #[error("singular linear system in Newton step")]
    SingularMatrix,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("refinement depth exceeded max_depth = {max_depth} at t = {t:.6e} (sub-step {dt:.3e})")]
    MaxDepthExceeded { max_depth: usize, t: f64, dt: f64 },

    #[error("step size underflow at t = {t:.6e}: proposed dt = {dt:.3e}")]
    StepUnderflow { t: f64, dt: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SolverError>;
