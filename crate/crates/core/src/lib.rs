//! Lane-level traffic forecasting toolkit.
//!
//! The crate is organised bottom-up: a small differentiable-computation
//! substrate ([`numerics`]), lane-network topology and adjacency
//! constructions ([`lane_graph`]), dataset ingestion and synthesis
//! ([`data`]), the GraphMLP forecaster ([`model`]) with reference
//! baselines ([`baselines`]), the shared optimizer loop ([`training`]),
//! and evaluation metrics ([`metrics`]).

pub mod baselines;
pub mod data;
pub mod lane_graph;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;
