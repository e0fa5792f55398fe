//! `slatelab`: a laboratory for recommendation policies on slate-based apps.
//!
//! The crate covers the full loop of building and judging a personalized
//! story recommender:
//!
//! * [`log`]: interaction records, the five-point engagement score, log
//!   files, outlier trimming and pre-period user covariates.
//! * [`models`]: mean, two-way fixed effects and matrix factorization
//!   engagement models trained with Adam on squared error through a sigmoid.
//! * [`policy`]: editorial, popularity and personalized rankings plus the
//!   weekly slate with daily removal of started and ignored stories.
//! * [`sim`]: synthetic worlds with known preferences, period simulation,
//!   two-arm experiments and exact policy values.
//! * [`analysis`]: treatment-effect estimators, rank-sum tests,
//!   heterogeneity and diagnostic tables for a two-arm experiment.
//! * [`ope`]: position effects, propensity models, an outcome regressor
//!   and the doubly-robust policy-value estimator with cluster bootstrap.
//! * [`pipeline`]: the end-to-end run used by the command-line tool.
//!
//! Replication loops, per-user simulation and bootstrap resampling run on
//! rayon when the `parallel` feature is enabled (default) and sequentially
//! otherwise; both paths produce identical output.

pub mod analysis;
pub mod error;
pub mod log;
pub mod models;
pub mod ope;
pub mod par;
pub mod pipeline;
pub mod policy;
pub mod seed;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use log::{InteractionRecord, LogDataset, OutcomeKind, Section, StoryId, UserId};
pub use models::{ModelKind, OutcomeModel};
