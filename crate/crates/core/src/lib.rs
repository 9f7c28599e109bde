//! Time-to-event modeling toolkit.
//!
//! The crate covers the full pipeline for right-censored survival data:
//!
//! - [`tabular`]: cohort data model, CSV ingestion, inclusion filtering, summaries
//! - [`preprocess`]: dummy coding, z-score scaling, correlation pruning
//! - [`impute`]: Nelson-Aalen transform, chained-equations imputation, Rubin pooling
//! - [`coxph`]: elastic-net Cox regression, Wald inference, Breslow baseline
//! - [`nnet`]: a small feedforward network with backprop, dropout and Adam
//! - [`deepsurv`] / [`deephit`]: neural survival models built on [`nnet`]
//! - [`metrics`]: Kaplan-Meier, C-index, IPCW Brier/IBS, cumulative/dynamic AUC, bootstrap
//! - [`harness`]: splits, leakage-safe cross-validation, grid search, experiments
//! - [`synth`]: synthetic proportional-hazards cohorts with known ground truth
//!
//! All computation is double precision. Every stochastic step takes an explicit
//! seed and uses a portable ChaCha stream, so results are reproducible bit for bit.

pub mod coxph;
pub mod curve;
pub mod deephit;
pub mod deepsurv;
pub mod harness;
pub mod impute;
pub mod linalg;
pub mod metrics;
pub mod nnet;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod tabular;

pub use coxph::{CoxModel, Penalty};
pub use curve::{CumHazardFn, SurvivalCurve};
pub use deephit::DeepHitModel;
pub use deepsurv::DeepSurvModel;
pub use harness::{ExperimentConfig, ModelFamily};
pub use tabular::{ColumnKind, ColumnSpec, Role, Schema, SurvivalDataset};
