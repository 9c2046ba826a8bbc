//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch at {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value produced by node {node}")]
    NonFinite { node: usize },

    #[error("backward called before evaluate")]
    BackwardBeforeForward,

    #[error("input slot {slot} not bound")]
    UnboundInput { slot: usize },

    #[error("token id {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("layer index {layer} out of range (model has layers 0..={max})")]
    LayerOutOfRange { layer: usize, max: usize },

    #[error("example {id} has an empty response")]
    EmptyResponse { id: u64 },

    #[error("parameter guard exceeded: {dim} > {guard} ({context})")]
    GuardExceeded {
        context: String,
        dim: usize,
        guard: usize,
    },

    #[error("training diverged at step {step}: loss {loss}")]
    TrainDiverged { step: usize, loss: f64 },

    #[error("optimization did not converge within {iters} iterations (grad norm {grad_norm:.3e})")]
    NoConvergence { iters: usize, grad_norm: f64 },

    #[error("probe fit failed: positive and negative means coincide")]
    DegenerateProbe,

    #[error("concept vector layer {concept} does not match requested layer {requested}")]
    LayerMismatch { concept: usize, requested: usize },

    #[error("eigendecomposition failed for layer {layer}")]
    EigenFailure { layer: String },

    #[error("matrix is singular within tolerance")]
    SingularMatrix,

    #[error("layer mask selects no layers")]
    EmptyLayerSelection,

    #[error("curvature fingerprint mismatch: requested {requested}, found {found}")]
    FingerprintMismatch { requested: String, found: String },

    #[error("corrupt payload in {path}: {detail}")]
    CorruptPayload { path: String, detail: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("empty dataset or split: {context}")]
    EmptyDataset { context: String },

    #[error("missing feature-activation record for example {id}")]
    MissingActivation { id: u64 },

    #[error("metric requires both classes, got a single class")]
    SingleClass,

    #[error("score sets are not aligned: {detail}")]
    MisalignedScores { detail: String },

    #[error("scorer failed on example {id}: {source}")]
    ScorerFailure {
        id: u64,
        #[source]
        source: Box<CoreError>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
