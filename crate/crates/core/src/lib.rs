//! Deterministic agent-based simulation of pandemic influenza over a
//! synthetic, census-shaped population.

pub mod analysis;
pub mod census;
pub mod cli;
pub mod disease;
pub mod engine;
pub mod popgen;
pub mod rng;
