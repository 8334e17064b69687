//! Experiment runner for diffusion-purified adversarial patch attacks on toy
//! vision-language retrieval models: corpus generation, training, batch
//! attacks, ablations, and report emission.

pub mod ablation;
pub mod config;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod manifest;
pub mod report;

pub use error::{Result, RunnerError};
