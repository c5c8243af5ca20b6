//! Architecture description, compound scaling and graph compilation.

pub mod config;
pub mod forward;
pub mod graph;

pub use config::{scale, variant, ArchConfig, BlockStyle, DownsampleStyle, ScalePlan, UpsampleStyle, Variant, NUM_STAGES};
pub use forward::{forward, forward_all, forward_recorded, forward_tape, ForwardOutput};
pub use graph::{
    GraphNode, InterpMode, LayerOp, NetworkGraph, ParamSpec, ShortcutNorm, SkipLink, StemStyle, StridePlacement, Structure,
    ValueId,
};

use crate::error::Result;

/// Compiles `config` with the committed structural convention.
pub fn build(config: &ArchConfig) -> Result<NetworkGraph> {
    NetworkGraph::build_with(config, crate::accounting::frozen().structure())
}
