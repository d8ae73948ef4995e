//! The spatial graph convolutional network: configuration, parameters, the
//! residual graph-convolution block, forward pass and cosine loss.

mod config;
mod model;
mod params;

pub use config::{Block, FeatureMode, ModelConfig};
pub use model::{
    cos_loss, rs_gcb_forward, BlockOpts, BlockRunning, Forward, ParamCount, RsGcbVars, SgcnModel,
};
pub use params::{Bound, ParamStore};

use crate::chargraph::{build_graph, to_undirected_self_loops, CharGraph};
use crate::error::Result;
use crate::ink::{preprocess, Trajectory};

/// Normalized, resampled, undirected graph with self-loops, ready to batch.
pub fn prepare_graph(traj: &Trajectory, config: &ModelConfig) -> Result<CharGraph> {
    let t = preprocess(traj, config.interval)?;
    Ok(to_undirected_self_loops(&build_graph(&t, config.penup_edges)?))
}

#[cfg(test)]
mod tests;
