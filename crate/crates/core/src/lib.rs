//! Sharded federated learning with exact client unlearning.
//!
//! Clients are organised into a merge tree: singleton shards at stage 0 are
//! merged `R` at a time until one root shard holds every client. Each shard
//! runs FedAvg among its clients starting from the weighted average of its
//! children's models, and every shard's final model is cached. Removing a
//! client only retrains the shards on its path to the root.
//!
//! Module map:
//! - [`numkit`]: model parameters, loss/gradient, local descent, angles.
//! - [`datagen`]: synthetic data, CSV ingestion, Dirichlet partitioning.
//! - [`engine`]: the staged training workflow and the on-disk cache.
//! - [`adaptive`]: direction-aware shard merging and round allocation.
//! - [`unlearn`]: path-only retraining and cost accounting.
//! - [`fairmetrics`]: performance and efficiency fairness scores.
//! - [`analysis`]: closed-form speedups and their counted counterparts.
//! - [`scenarios`]: cascaded leaving, poisoning-via-unlearning, baselines.

pub mod adaptive;
pub mod analysis;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod fairmetrics;
pub mod numkit;
pub mod rng;
pub mod scenarios;
pub mod unlearn;

pub use error::{Error, Result};
