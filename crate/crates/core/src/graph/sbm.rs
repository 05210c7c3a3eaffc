//! Planted-partition (stochastic block model) generator with per-class
//! signal feature dimensions. This is the desk-scale stand-in for the
//! citation benchmarks: the planted dimensions double as a ground-truth
//! oracle for feature attention.

use super::{Dataset, FeatureMatrix, Graph, GraphError, LabelSet, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub n_per_class: usize,
    pub n_classes: u16,
    /// Probability of an edge between two nodes of the same class.
    pub p_in: f64,
    /// Probability of an edge between two nodes of different classes.
    pub p_out: f64,
    pub signal_dims_per_class: usize,
    /// Activation probability of a node's own signal dimensions.
    pub q_hi: f64,
    /// Activation probability everywhere else.
    pub q_lo: f64,
    pub n_features: usize,
    pub seed: u64,
}

impl SbmSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_out >= 0.0 && self.p_out < self.p_in && self.p_in <= 1.0) {
            return Err(GraphError::Validation(format!(
                "need 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            )));
        }
        if !(self.q_lo >= 0.0 && self.q_lo < self.q_hi && self.q_hi <= 1.0) {
            return Err(GraphError::Validation(format!(
                "need 0 <= q_lo < q_hi <= 1, got q_hi={} q_lo={}",
                self.q_hi, self.q_lo
            )));
        }
        if self.n_classes < 2 {
            return Err(GraphError::Validation("need at least 2 classes".into()));
        }
        if self.n_per_class == 0 {
            return Err(GraphError::Validation("n_per_class must be positive".into()));
        }
        if self.n_classes as usize * self.signal_dims_per_class > self.n_features {
            return Err(GraphError::Validation(format!(
                "{} classes x {} signal dims exceed {} features",
                self.n_classes, self.signal_dims_per_class, self.n_features
            )));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.n_per_class * self.n_classes as usize
    }

    /// The planted signal dimensions of class `c`: a contiguous block.
    pub fn signal_dims(&self, class: u16) -> Range<usize> {
        let k = self.signal_dims_per_class;
        class as usize * k..(class as usize + 1) * k
    }
}

/// Sample a dataset: contiguous label blocks, intra-class edges with
/// probability `p_in` and inter-class with `p_out` (each undirected pair
/// emitted in both directions, no self-loops), and Bernoulli features
/// activated at `q_hi` on a node's planted signal dims, `q_lo` elsewhere.
pub fn generate_sbm(spec: &SbmSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_nodes();
    let class_of = |v: usize| (v / spec.n_per_class) as u16;

    let mut edges: Vec<(u32, u32)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if class_of(i) == class_of(j) { spec.p_in } else { spec.p_out };
            if rng.gen_bool(p) {
                edges.push((i as u32, j as u32));
                edges.push((j as u32, i as u32));
            }
        }
    }
    let graph = Graph::new(n, edges)?;

    let mut values = Vec::with_capacity(n * spec.n_features);
    for v in 0..n {
        let signal = spec.signal_dims(class_of(v));
        for j in 0..spec.n_features {
            let q = if signal.contains(&j) { spec.q_hi } else { spec.q_lo };
            values.push(if q > 0.0 && rng.gen_bool(q) { 1.0 } else { 0.0 });
        }
    }
    let features = FeatureMatrix::new(n, spec.n_features, values)?;
    let labels = LabelSet::new((0..n).map(|v| Some(class_of(v))).collect(), spec.n_classes)?;
    let original_ids = (0..n as u64).collect();
    Ok(Dataset { graph, features, labels, original_ids })
}
