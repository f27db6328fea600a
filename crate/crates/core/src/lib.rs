//! Peer-comparison auditing of binary decision systems.
//!
//! Each protected-group instance is matched to unprotected δ-peers through its
//! identification coefficient (a propensity-weighted ratio), the predicted
//! favourable-outcome probability of the instance is compared with repeated
//! peer sub-sample means by a z-test, and the instance is placed in one of the
//! treatment categories. Fairly treated rejections get a per-feature watch-out
//! list, and a robustness harness measures how stable the verdicts are when the
//! protected group is under-sampled.
//!
//! The end-to-end flow lives in [`pipeline`]; the `peerfair` binary wraps it.

// Negated comparisons such as `!(x > 0.0)` are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod cli;
pub mod data;
pub mod error;
pub mod explain;
pub mod ic;
pub mod model;
pub mod peers;
pub mod pipeline;
pub mod report;
pub mod robustness;
pub mod synth;
mod util;

pub use audit::{AuditConfig, AuditResult, Category, TestStatistic};
pub use data::{Dataset, FeatureSchema, Group, Instance};
pub use error::{Error, Result};
pub use ic::IcTable;
pub use model::{ModelSelectionReport, ProbabilityModel};
pub use peers::PeerSet;
pub use pipeline::{PipelineConfig, PipelineRun};
