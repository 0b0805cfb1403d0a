//! Training-and-diagnostics workbench for grokking on modular arithmetic.
//!
//! The crate trains a small pre-norm transformer encoder on `y = op(a,b) mod p`
//! tasks, stores dense parameter checkpoints, and probes which attention-space
//! directions matter for feature formation:
//!
//! * **SED estimators** ([`seddiag`]): top-K right singular vectors of a rolling
//!   window of attention-slice vectors — either realized optimizer steps
//!   ("update SED") or raw loss gradients ("gradient SED"), plus per-op and
//!   per-example variants.
//! * **Centroid coupling** ([`centroid`]): the sensitivity of per-probe
//!   input-embedding gradients to parameter perturbations along a direction,
//!   normalized against random-direction baselines (the coupling ratio `R_k`).
//! * **Interventions** ([`experiment`]): rank-3 keep/remove projections applied
//!   to the attention gradient or to the realized AdamW update during training,
//!   against random-subspace and control arms.
//!
//! Everything is deterministic given a master seed: every stochastic consumer
//! draws from its own hash-derived stream ([`rng::RngStream`]).

pub mod centroid;
pub mod cli;
pub mod data;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;
pub mod seddiag;

pub mod experiment;

pub use linalg::LinalgError;

/// Crate-wide error type for everything above raw linear algebra.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error("config error: {0}")]
    Config(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("checkpoint store error: {0}")]
    Store(String),
    #[error("analysis error: {0}")]
    Analysis(String),
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
