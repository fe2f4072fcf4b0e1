//! Crate-wide error type for graph construction, differentiation, surgery,
//! optimizers and the training harness. Kernel-level failures are wrapped
//! from [`TensorError`].

use crate::graph::VarId;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("graph input {0} is unbound")]
    UnboundInput(VarId),
    #[error("variable {0} is not defined in this graph")]
    UnknownVar(VarId),
    #[error("equation {var} evaluated to shape {actual:?}, declared {expected:?}")]
    ShapeRule {
        var: VarId,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("graph output must be declared before use")]
    MissingOutputs,
    #[error("data inputs disagree on batch extent: {0:?}")]
    BatchExtentMismatch(Vec<usize>),
    #[error("graph has no data input with a batch axis")]
    NoBatchAxis,

    #[error("loss output has shape {0:?}, expected a scalar")]
    NonScalarLoss(Vec<usize>),
    #[error("{0} is not a parameter input of the graph")]
    NotAParameter(VarId),
    #[error("parameter {0} is consumed by {1} equations; tied weights are unsupported")]
    TiedParameter(VarId, usize),
    #[error("parameter {0} does not influence the loss")]
    UnusedParameter(VarId),
    #[error("no differentiation rule for primitive {0}")]
    MissingVjp(&'static str),
    #[error("batch axis of {var} is contracted by a forward equation; cannot differentiate per-example structure")]
    BatchAxisConsumed { var: VarId },

    #[error("no batch-reduce site found for parameter {0}")]
    NoSite(VarId),
    #[error("reduce-site parse disagrees with construction tags: {0}")]
    SiteMismatch(String),
    #[error("output {var} is produced by an unsupported site pattern: {detail}")]
    UnsupportedSite { var: VarId, detail: String },
    #[error("factorable rewrite requested at a non-rank-one site for parameter {0}")]
    FactorableAtSequence(VarId),

    #[error("invalid hyperparameter {name}: {value}")]
    InvalidHyper { name: &'static str, value: f64 },
    #[error("preconditioner went negative ({value}) for a variant without filtering")]
    NegativePreconditioner { value: f64 },
    #[error("MicroSignSGD step requires the mean-sign statistic")]
    MissingMeanSign,
    #[error("schedule evaluated at step {t} outside [0, {total}]")]
    ScheduleRange { t: u64, total: u64 },

    #[error("moment estimators need batch size >= 2, got {0}")]
    EstimatorBatch(usize),
    #[error("sign SNR needs p strictly inside (0, 1), got {0}")]
    SnrDomain(f64),
    #[error("update-moment calculus: {0}")]
    UpdateMoments(&'static str),

    #[error("config error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
