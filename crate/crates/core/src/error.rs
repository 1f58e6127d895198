use thiserror::Error;

/// Errors shared across the model, solver and simulation layers.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Rotation angle at (or numerically indistinguishable from) pi; the
    /// rotation axis is not unique so the inverse retraction is undefined.
    #[error("rotation angle is pi; axis is ambiguous")]
    AmbiguousAxis,

    /// Duplicate node positions (or an all-zero weight set) make the
    /// nearest-node weights of the deformation graph undefined.
    #[error("degenerate deformation graph: {0}")]
    DegenerateGraph(String),

    /// Graph topology violates an invariant (asymmetric neighbors,
    /// non-positive edge weight, too few nodes).
    #[error("invalid deformation graph: {0}")]
    InvalidGraph(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A residual evaluation produced a non-finite value while probing.
    #[error("non-finite residual while evaluating jacobian")]
    NonFiniteResidual,

    /// No feature has a fully observed window; the prior constrains nothing.
    #[error("unsolvable instance: {0}")]
    UnsolvableInstance(String),

    /// Fewer than three co-visible features between consecutive steps.
    #[error("initialization gap between steps {from} and {to}: {covisible} co-visible features")]
    InitializationGap {
        from: usize,
        to: usize,
        covisible: usize,
    },

    /// Damping overflowed; the solver could not make progress.
    #[error("solver diverged: damping overflow at iteration {0}")]
    Divergence(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
