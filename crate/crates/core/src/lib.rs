//! Shift-aware training for short-term multi-region traffic forecasting.
//!
//! Any windowed graph-temporal predictor can be wrapped with three pieces:
//! a learnable per-region, per-month environment feature pool injected as
//! extra leading time slices; per-month node embeddings that generate a
//! time-varying adjacency matrix; and sample weights that combine a recency
//! classifier's probability with a decay in month distance. Both pools are
//! held piecewise-constant over months by total-variation penalties.
//!
//! Module map:
//! - [`ingestion`]: trip records to hourly region cubes, region filtering, synthetic cubes
//! - [`dataset`]: sliding windows, month bookkeeping, scenario splits, z-scoring
//! - [`envpool`]: environment feature pool, node embeddings, adjacency, TV penalty
//! - [`reweight`]: recency labels, classifier, sample weights
//! - [`models`]: predictor interface and the two reference models
//! - [`training`]: loss, optimizer schedule, fitting, pipeline, checkpoints
//! - [`evaluation`]: metrics, baselines, ablations, results tables
//! - [`cli`]: config-driven experiment commands

pub mod cli;
pub mod dataset;
pub mod envpool;
pub mod error;
pub mod evaluation;
pub mod fsutil;
pub mod ingestion;
pub mod models;
pub mod nn;
pub mod reweight;
pub mod training;

pub use error::{Error, Result};
