//! Bayesian cumulative-logit models for two-arm ordinal outcomes.
//!
//! The crate is organised bottom-up:
//!
//! - [`ordcore`]: probability/cumulative-logit transforms, the stick-breaking
//!   simplex map and the count containers.
//! - [`dgm`]: control-arm distributions and the three proportionality
//!   scenarios used to simulate trials.
//! - [`posterior`]: the five analysis models (separate logistic, PO,
//!   unconstrained PPO and two constrained PPO presets) with exact gradients.
//! - [`sampler`]: a self-contained NUTS sampler with windowed warmup.
//! - [`diagnostics`]: rank-normalized split R-hat, bulk/tail ESS, summaries.
//! - [`simstudy`]: scenario grids, replicates, aggregation and MCSEs.
//! - [`trialio`]: trial data ingestion and the case-study analysis path.
//! - [`verify`]: oracle suites (finite differences, grid posterior, analytic
//!   targets) shared by the command line and the test suites.

pub mod dgm;
pub mod diagnostics;
mod error;
pub mod ordcore;
pub mod posterior;
pub mod rng;
pub mod sampler;
pub mod simstudy;
pub mod trialio;
pub mod verify;

pub use error::{Error, Result};

pub use dgm::{ControlShape, PropScenario, TruePair};
pub use diagnostics::{DiagnosticsBundle, PosteriorSummary};
pub use ordcore::{CumulativeLogits, OrdinalCounts, Simplex};
pub use posterior::{AnalysisModel, ModelSpec, ModelVariant, ParamVector, PriorConfig};
pub use sampler::{FitOutcome, PosteriorDraws, SamplerConfig};
pub use simstudy::{AggregateRow, GridPlan, MetricRecord, ScenarioConfig};
pub use trialio::{CaseAnalysisResult, TrialDataset, TrialSchema};
