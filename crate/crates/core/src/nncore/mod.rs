//! Minimal reverse-mode autodiff on dense matrices and the network layers
//! built on top of it.

pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod tape;

pub use layers::{graph_conv, BranchProjections, Ctx, Dense, Dit, DitOutput, DitVars, Gcgru, GraphConv, OutputHead, SingleStation};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{Init, ParamId, ParameterSet};
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
mod tests;
