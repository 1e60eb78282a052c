//! Experiment driver: training runs, sampling runs, the ablation matrix,
//! sensitivity sweeps, pseudo-target audits and a self-check suite.

pub mod check;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod run;
pub mod variant;

pub use config::RunConfig;
pub use variant::Variant;
