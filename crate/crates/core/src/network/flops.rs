//! Static complexity accounting.
//!
//! `count_flops` tallies the multiply-accumulate operations of the
//! attention computations in one full-graph forward pass, with each MAC
//! counted as 2 FLOPs. Counted per layer and per head:
//!
//! - node-attention scoring: the two per-node attention dot products
//!   (`2 N d`) — the per-edge score itself is an add of precomputed
//!   halves;
//! - attention-weighted aggregation over the in-edges, self-loops
//!   included (`E' d`);
//! - masked feature scoring: one accumulate per representative entry,
//!   estimated as `N F / s^2`, plus the `C F` per-dimension score
//!   products;
//! - feature-attention application (`N F`).
//!
//! Dense feature projections (w_n, w_f, w_o) are excluded: their cost is
//! dominated by input sparsity on the benchmark datasets and is not part
//! of the attention mechanism this counter characterizes. Softmax
//! normalizations and activations are not MACs and are not counted.

use super::{ModelConfig, Result};
use crate::graph::{Dataset, Graph};
use serde::{Deserialize, Serialize};

/// The shape numbers the counters need; decoupled from a concrete graph
/// so paper-scale configurations can be priced without materializing
/// them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub n_nodes: usize,
    /// Directed edge count, self-loops excluded.
    pub n_directed_edges: usize,
    pub n_features: usize,
    pub n_classes: usize,
}

impl GraphStats {
    pub fn from_dataset(dataset: &Dataset) -> Self {
        GraphStats {
            n_nodes: dataset.graph.n_nodes(),
            n_directed_edges: count_non_loop_edges(&dataset.graph),
            n_features: dataset.features.n_features(),
            n_classes: dataset.labels.n_classes(),
        }
    }

    /// Citation-benchmark shape: 2485 nodes, 5069 undirected edges,
    /// 1433 features, 7 classes.
    pub fn cora_shaped() -> Self {
        GraphStats {
            n_nodes: 2485,
            n_directed_edges: 2 * 5069,
            n_features: 1433,
            n_classes: 7,
        }
    }
}

fn count_non_loop_edges(graph: &Graph) -> usize {
    graph.edges().iter().filter(|&&(s, d)| s != d).count()
}

/// Attention-mechanism MACs of one forward pass, in MFLOPs (2 FLOPs per
/// MAC). Strictly increasing in heads and in 1/s; monotone in hidden
/// width, layer count, node count, and feature dimension.
pub fn count_flops(config: &ModelConfig, stats: &GraphStats) -> Result<f64> {
    config.validate()?;
    let n = stats.n_nodes as f64;
    let e_loops = (stats.n_directed_edges + stats.n_nodes) as f64;
    let c = stats.n_classes as f64;
    let s2 = (config.pool_size * config.pool_size) as f64;
    let mut macs = 0.0;
    for l in 0..config.layers {
        let (f_in, d_out) = config.layer_dims(l, stats.n_features, stats.n_classes);
        let (f_in, d_out) = (f_in as f64, d_out as f64);
        let nab_score = 2.0 * n * d_out;
        let nab_aggregate = e_loops * d_out;
        let fab_score = (n * f_in / s2).ceil() + c * f_in;
        let fab_apply = n * f_in;
        macs += config.heads as f64 * (nab_score + nab_aggregate + fab_score + fab_apply);
    }
    Ok(2.0 * macs / 1e6)
}

/// Learnable parameter count for a config on data of the given shape.
pub fn count_params(config: &ModelConfig, stats: &GraphStats) -> Result<usize> {
    config.validate()?;
    let mut total = 0usize;
    for l in 0..config.layers {
        let (f_in, d_out) = config.layer_dims(l, stats.n_features, stats.n_classes);
        let per_head = f_in * d_out // w_n
            + 2 * d_out // attn
            + f_in * d_out // w_f
            + stats.n_classes * f_in // theta
            + d_out * d_out; // w_o
        total += config.heads * per_head + config.heads; // + gates
    }
    Ok(total)
}
