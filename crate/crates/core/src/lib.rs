//! Feature attributions with verified top-K rankings.
//!
//! Shapley values are estimated by permutation sampling or KernelSHAP and
//! LIME selections by LARS; the ranking modules then decide how many of the
//! leading ranks are statistically certified, sampling more where needed.

pub mod data;
pub mod error;
pub mod estimate;
pub mod model;
pub mod rng;
pub mod stats;
pub mod value;
pub mod sampling;
pub mod kernelshap;
pub mod verify;
pub mod rankshap;
pub mod sprt;
pub mod lime;
pub mod global;
pub mod bridge;
pub mod fixtures;
pub mod experiment;

pub use data::TabularDataset;
pub use error::{AttrError, Result};
pub use estimate::MeanVarEstimate;
pub use model::{Model, ModelHandle, OutputKind};
pub use rankshap::{SamplingBudget, StableAttribution};
pub use value::{CoalitionMask, Imputation, ValueFunction};
pub use verify::{AttributionSet, RankingMode, TestMode, VerifiedRanking};
