//! Graph structure, node features, labels, splits, dataset I/O, and the
//! synthetic generator.

mod dataset;
mod sbm;

pub use dataset::{
    induced_subset, load_dataset, make_split, save_dataset, Dataset, FeatureMatrix, LabelSet,
    Split, UNLABELED,
};
pub use sbm::{generate_sbm, SbmSpec};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Directed graph over dense node ids `[0, n)` with a CSR index of
/// in-neighbors. Undirected inputs are stored as two directed edges, so
/// for those the in-neighborhood equals the out-neighborhood.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n_nodes: usize,
    /// Edges as (src, dst), sorted by (dst, src). CSR segments index
    /// into this ordering.
    edges: Vec<(u32, u32)>,
    /// offsets[v]..offsets[v+1] spans the in-edges of node v.
    offsets: Vec<usize>,
    /// Edge sources in canonical order: the per-node neighbor lists,
    /// each sorted ascending.
    neighbors: Vec<u32>,
    has_self_loops: bool,
}

impl Graph {
    /// Build from directed edges. Endpoints must be in range and the edge
    /// list must be duplicate-free.
    pub fn new(n_nodes: usize, mut edges: Vec<(u32, u32)>) -> Result<Self> {
        for &(s, d) in &edges {
            if s as usize >= n_nodes || d as usize >= n_nodes {
                return Err(GraphError::Validation(format!(
                    "edge ({s}, {d}) outside node range [0, {n_nodes})"
                )));
            }
        }
        edges.sort_unstable_by_key(|&(s, d)| (d, s));
        if let Some(w) = edges.windows(2).find(|w| w[0] == w[1]) {
            return Err(GraphError::Validation(format!(
                "duplicate edge ({}, {})",
                w[0].0, w[0].1
            )));
        }
        let mut offsets = vec![0usize; n_nodes + 1];
        for &(_, d) in &edges {
            offsets[d as usize + 1] += 1;
        }
        for v in 0..n_nodes {
            offsets[v + 1] += offsets[v];
        }
        let neighbors: Vec<u32> = edges.iter().map(|&(s, _)| s).collect();
        let has_self_loops = n_nodes > 0
            && (0..n_nodes).all(|v| neighbors[offsets[v]..offsets[v + 1]].contains(&(v as u32)));
        Ok(Graph { n_nodes, edges, offsets, neighbors, has_self_loops })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges as (src, dst), in the canonical (dst, src) sort order that
    /// the CSR segments follow.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn has_self_loops(&self) -> bool {
        self.has_self_loops
    }

    /// Sources of the edges arriving at `v`, ascending.
    pub fn in_neighbors(&self, v: usize) -> &[u32] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    /// CSR segment boundaries over the canonical edge order: segment `v`
    /// spans the in-edges of node `v`.
    pub fn in_edge_offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Edge sources in canonical order (aligned with `edges()`).
    pub fn edge_sources(&self) -> Vec<usize> {
        self.neighbors.iter().map(|&s| s as usize).collect()
    }
}

/// Add one self-loop per node. Idempotent.
pub fn add_self_loops(g: &Graph) -> Graph {
    let mut edges = g.edges.clone();
    for v in 0..g.n_nodes as u32 {
        if !g.in_neighbors(v as usize).contains(&v) {
            edges.push((v, v));
        }
    }
    Graph::new(g.n_nodes, edges).expect("self-loop augmentation preserves validity")
}
