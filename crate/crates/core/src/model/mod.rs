//! Multi-exit encoder: configuration, segment ownership, parameters, the
//! forward pass (full and incremental) and checkpoint files.

pub mod checkpoint;
mod config;
mod forward;
mod params;
mod topology;

pub use config::ModelConfig;
pub use forward::{
    Batch, ExitOutputs, ExitStep, ForwardGraph, Gating, IncrementalForward, MultiExitModel,
    LAYERNORM_EPS,
};
pub use params::{Parameter, ParameterStore};
pub use topology::ExitTopology;

/// Builds a seeded model, returning its parameters and topology.
pub fn init_model(config: ModelConfig) -> crate::Result<(ParameterStore, ExitTopology)> {
    let model = MultiExitModel::init(config)?;
    Ok((model.params, model.topology))
}
