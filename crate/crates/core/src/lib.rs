//! Simulator for a reconfigurable ReRAM crossbar CNN accelerator.
//!
//! Layers are lowered to functional blocks (FBs) that share one crossbar
//! array per group; the floorplanner places them, the data mapper fills
//! cells, and the pipeline model produces a cycle trace from which
//! utilization, latency and energy are derived.

pub mod baseline;
pub mod bits;
pub mod config;
pub mod crossbar;
pub mod datamap;
pub mod exec;
pub mod floorplan;
pub mod logic;
pub mod lowering;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod plan;
pub mod quant;
pub mod reference;
pub mod session;
pub mod workload;

pub use model::{LayerKind, LayerSpec, ModelError, ModelGraph, Shape};
pub use reference::{reference_inference, InferenceOutput, ModelWeights, Tensor};

/// Any failure surfaced by the simulator's top-level operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Plan(#[from] plan::PlanError),
    #[error(transparent)]
    Lowering(#[from] lowering::LoweringError),
    #[error(transparent)]
    Exec(#[from] exec::ExecError),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}
