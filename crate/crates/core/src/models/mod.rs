//! Network definitions, execution and checkpoints.
//!
//! A [`NetworkSpec`] is a declarative layer list that can be traced
//! symbolically; a [`Network`] instantiates it with parameters and runs
//! forward and backward passes.

mod checkpoint;
mod network;
mod spec;

pub use checkpoint::{load_checkpoint, load_into, save_checkpoint, Checkpoint, Record, CHECKPOINT_VERSION};
pub use network::{build_stateful, build_stateless, Network, Pass};
pub use spec::{ArchConfig, Architecture, LayerKind, LayerSpec, NetworkSpec, PaddingRule, SymShape, TraceRow};

#[cfg(test)]
mod tests;
