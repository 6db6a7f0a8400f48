//! Heterogeneous sparse mixture-of-experts: an order-blind feedforward expert
//! and sequence experts (GRU, TCN) behind a temperature-softmax gate trained
//! with straight-through Top-1 routing.

pub mod analytics;
pub mod cli;
pub mod config;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod experts;
pub mod losses;
pub mod moe;
pub mod tasks;
pub mod trainer;

pub use error::{HectoError, Result};

/// Seeded generator owned by a single run.
pub type RunRng = rand_chacha::ChaCha8Rng;
