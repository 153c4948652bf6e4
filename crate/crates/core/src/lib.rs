//! Offline tactile safety rewards, reward-weighted flow-matching fine-tuning
//! and tactile distillation, around a compact flow policy and a synthetic
//! grasp simulator.

pub mod dataset;
pub mod distill;
pub mod episode;
pub mod error;
pub mod params;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod sim;
pub mod stats;
pub mod store;
pub mod tactile;
pub mod trainer;

pub use error::{Error, Result};
