//! Deterministic simulator for federated training of binary and ternary
//! weight networks aggregated by voting.
//!
//! Clients train latent real weights, squash them through a normalization
//! map, stochastically round the result to discrete levels, and upload the
//! rounded bits. The server combines the uploads by (optionally
//! reputation-weighted) voting, clips the resulting per-coordinate
//! probabilities and broadcasts them; clients rebuild latent weights from
//! the broadcast and continue. The crate also ships the classic baselines
//! the scheme is measured against, a set of payload attacks, and Monte
//! Carlo checks for the statements the aggregation rules rest on.

pub mod adversary;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod lemmas;
pub mod metrics;
pub mod nn;
pub mod quantize;
pub mod rng;
pub mod vote;

pub use error::{Error, Result};
