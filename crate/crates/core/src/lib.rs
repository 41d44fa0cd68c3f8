//! Deterministic federated-learning simulator with influence-oriented
//! personalized aggregation.
//!
//! Every client measures how much each peer matters to it by leave-one-out
//! evaluation over the round-start models: a client-level influence vector
//! steers the averaging of representation layers and a class-level influence
//! matrix steers the per-class averaging of the linear classifier. FedAvg,
//! FedProx and purely local training are included as baselines, together with
//! the ablation variants that disable one of the two influence measures.
//!
//! Module map:
//! - [`model`]: dense network, exact backprop, softmax cross-entropy, Adam.
//! - [`data`]: synthetic feature-shift client shards.
//! - [`influence`]: leave-one-out losses and their tempered normalization.
//! - [`aggregation`]: FedAvg, influence-weighted and FedProx combination rules.
//! - [`orchestration`]: the round loop and the two-stage local update.
//! - [`config`], [`report`]: run configuration, batteries, sweeps and CSV/JSON output.

pub mod aggregation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod influence;
pub mod model;
pub mod orchestration;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
