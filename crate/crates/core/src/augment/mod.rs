//! Attention-guided graph data augmentation: representative-dimension
//! extraction from a trained model's feature attention, minority-node
//! cloning in four modes, two-class imbalance construction and ratio
//! sweeps, and all-category rebalancing.
//!
//! Cloning never mutates original nodes; clones get the source label,
//! enter the train split, and (by default) inherit the source's
//! neighborhood plus a link to the source, both directions.

mod sweep;

pub use sweep::{ratio_sweep, ModeSummary, SweepCell, SweepConfig, SweepMode, SweepReport};

use crate::fab::FeatureAttention;
use crate::graph::{Dataset, FeatureMatrix, Graph, GraphError, LabelSet, Split};
use crate::network::{AttentionState, NetworkError};
use crate::tensor::split_seed;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// How clone features are derived from the source row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    /// Verbatim copy.
    Ori,
    /// All non-representative dimensions cleared.
    AllClean,
    /// Each non-representative dimension independently cleared with
    /// probability `p_a`.
    PartClean,
    /// Each non-representative dimension independently replaced, with
    /// probability `p_a`, by a draw from that dimension's observed value
    /// multiset within the category.
    Noise,
}

impl AugmentMode {
    pub fn short_name(&self) -> &'static str {
        match self {
            AugmentMode::Ori => "ori",
            AugmentMode::AllClean => "aa",
            AugmentMode::PartClean => "ap",
            AugmentMode::Noise => "an",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ori" => Ok(AugmentMode::Ori),
            "aa" => Ok(AugmentMode::AllClean),
            "ap" => Ok(AugmentMode::PartClean),
            "an" => Ok(AugmentMode::Noise),
            other => Err(AugmentError::Contract(format!("unknown augmentation mode '{other}'"))),
        }
    }

    fn needs_p_a(&self) -> bool {
        matches!(self, AugmentMode::PartClean | AugmentMode::Noise)
    }
}

/// How clones are wired into the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloneWiring {
    /// Source's full neighbor set plus an edge to the source.
    Inherit,
    /// Only the edge to the source.
    SourceOnly,
}

/// Per-category sets of feature dimensions whose attention meets the
/// threshold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepresentativeSet {
    sets: Vec<Vec<usize>>,
    n_features: usize,
}

impl RepresentativeSet {
    pub fn dims(&self, category: usize) -> &[usize] {
        &self.sets[category]
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn membership(&self, category: usize) -> Vec<bool> {
        let mut m = vec![false; self.n_features];
        for &j in &self.sets[category] {
            m[j] = true;
        }
        m
    }

    /// Assemble from explicit per-category dimension lists.
    pub fn from_sets(sets: Vec<Vec<usize>>, n_features: usize) -> Self {
        RepresentativeSet { sets, n_features }
    }

    /// Every dimension representative for the given category (test
    /// convenience / ORI equivalence).
    pub fn all(n_categories: usize, n_features: usize) -> Self {
        RepresentativeSet {
            sets: vec![(0..n_features).collect(); n_categories],
            n_features,
        }
    }
}

/// Dimensions with `alpha >= tau` per category (the uniform level `1/F`
/// is the conventional threshold, inclusive). An empty set falls back to
/// the top-1 dimension.
pub fn extract_representative(alpha: &FeatureAttention, tau: f64) -> RepresentativeSet {
    let f = alpha.n_features();
    let sets = alpha
        .alphas()
        .iter()
        .map(|row| {
            let mut dims: Vec<usize> =
                (0..f).filter(|&j| row[j] >= tau).collect();
            if dims.is_empty() {
                let mut best = 0;
                for j in 1..f {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                dims.push(best);
            }
            dims
        })
        .collect();
    RepresentativeSet { sets, n_features: f }
}

/// Representative sets from a trained model's first-layer attention
/// (head-averaged), which lives in the original feature space.
pub fn representative_from_state(state: &AttentionState, tau: f64) -> RepresentativeSet {
    let rows = state.mean_alpha(0);
    let f = rows[0].len();
    extract_representative(&FeatureAttention::from_rows(rows, f), tau)
}

/// Append `count` clones of the category's train nodes (round-robin over
/// them in ascending id order). Features follow the mode; the label and
/// train membership are inherited.
#[allow(clippy::too_many_arguments)]
pub fn clone_nodes(
    dataset: &Dataset,
    split: &Split,
    category: u16,
    count: usize,
    mode: AugmentMode,
    rep: &RepresentativeSet,
    p_a: f64,
    wiring: CloneWiring,
    seed: u64,
) -> Result<(Dataset, Split)> {
    if mode.needs_p_a() && !(p_a > 0.0 && p_a < 1.0) {
        return Err(AugmentError::Contract(format!(
            "p_a must be in (0, 1) for mode {}, got {p_a}",
            mode.short_name()
        )));
    }
    let sources: Vec<usize> = split
        .train
        .iter()
        .copied()
        .filter(|&v| dataset.labels.label(v) == Some(category))
        .collect();
    if sources.is_empty() {
        return Err(AugmentError::Capacity(format!(
            "category {category} has no train nodes to clone"
        )));
    }
    let f = dataset.features.n_features();
    if rep.n_features() != f {
        return Err(AugmentError::Contract(format!(
            "representative set built for {} dims, dataset has {f}",
            rep.n_features()
        )));
    }
    let is_rep = rep.membership(category as usize);

    // Observed value multiset per dimension within the category's train
    // nodes; feeds the noise mode.
    let value_pool: Vec<Vec<f64>> = (0..f)
        .map(|j| sources.iter().map(|&v| dataset.features.row(v)[j]).collect())
        .collect();

    let n = dataset.graph.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = dataset.features.values().to_vec();
    let mut labels: Vec<Option<u16>> = dataset.labels.labels().to_vec();
    let mut edges: Vec<(u32, u32)> = dataset.graph.edges().to_vec();
    let mut original_ids = dataset.original_ids.clone();
    let next_original = original_ids.iter().copied().max().unwrap_or(0) + 1;
    let mut split = split.clone();

    for i in 0..count {
        let src = sources[i % sources.len()];
        let clone_id = (n + i) as u32;
        let mut row = dataset.features.row(src).to_vec();
        match mode {
            AugmentMode::Ori => {}
            AugmentMode::AllClean => {
                for (j, v) in row.iter_mut().enumerate() {
                    if !is_rep[j] {
                        *v = 0.0;
                    }
                }
            }
            AugmentMode::PartClean => {
                for (j, v) in row.iter_mut().enumerate() {
                    if !is_rep[j] && rng.gen_bool(p_a) {
                        *v = 0.0;
                    }
                }
            }
            AugmentMode::Noise => {
                for (j, v) in row.iter_mut().enumerate() {
                    if !is_rep[j] && rng.gen_bool(p_a) {
                        let pool = &value_pool[j];
                        *v = pool[rng.gen_range(0..pool.len())];
                    }
                }
            }
        }
        values.extend_from_slice(&row);
        labels.push(Some(category));
        original_ids.push(next_original + i as u64);

        if wiring == CloneWiring::Inherit {
            for &u in dataset.graph.in_neighbors(src) {
                edges.push((clone_id, u));
                edges.push((u, clone_id));
            }
        }
        edges.push((clone_id, src as u32));
        edges.push((src as u32, clone_id));
        split.train.push(n + i);
    }

    let graph = Graph::new(n + count, edges)?;
    let features = FeatureMatrix::new(n + count, f, values)?;
    let labels = LabelSet::new(labels, dataset.labels.n_classes() as u16)?;
    split.train.sort_unstable();
    Ok((Dataset { graph, features, labels, original_ids }, split))
}

/// Induced two-class dataset with an imbalanced train set.
///
/// Keeps exactly the nodes labeled `maj` or `min` (relabeled 0/1), keeps
/// the edges among them, and builds a split whose train set holds every
/// majority train node plus a minority train subset sized for a
/// `10 : ratio_r` imbalance. Validation is the majority's held-out
/// labeled nodes; the test set is minority-only.
pub fn build_two_class_dataset(
    dataset: &Dataset,
    split: &Split,
    maj: u16,
    min: u16,
    ratio_r: usize,
    seed: u64,
) -> Result<(Dataset, Split)> {
    if maj == min {
        return Err(AugmentError::Contract("majority and minority classes must differ".into()));
    }
    if !(1..=10).contains(&ratio_r) {
        return Err(AugmentError::Contract(format!(
            "ratio must be in 10:1 .. 10:10, got 10:{ratio_r}"
        )));
    }
    let keep: Vec<usize> = (0..dataset.graph.n_nodes())
        .filter(|&v| {
            matches!(dataset.labels.label(v), Some(l) if l == maj || l == min)
        })
        .collect();
    let mut dense = vec![usize::MAX; dataset.graph.n_nodes()];
    for (new, &old) in keep.iter().enumerate() {
        dense[old] = new;
    }

    let f = dataset.features.n_features();
    let mut values = Vec::with_capacity(keep.len() * f);
    let mut labels = Vec::with_capacity(keep.len());
    let mut original_ids = Vec::with_capacity(keep.len());
    for &old in &keep {
        values.extend_from_slice(dataset.features.row(old));
        labels.push(Some(u16::from(dataset.labels.label(old) == Some(min))));
        original_ids.push(dataset.original_ids[old]);
    }
    let edges: Vec<(u32, u32)> = dataset
        .graph
        .edges()
        .iter()
        .filter(|&&(s, d)| dense[s as usize] != usize::MAX && dense[d as usize] != usize::MAX)
        .map(|&(s, d)| (dense[s as usize] as u32, dense[d as usize] as u32))
        .collect();

    let graph = Graph::new(keep.len(), edges)?;
    let features = FeatureMatrix::new(keep.len(), f, values)?;
    let labels = LabelSet::new(labels, 2)?;

    let maj_train: Vec<usize> = split
        .train
        .iter()
        .filter(|&&v| dataset.labels.label(v) == Some(maj))
        .map(|&v| dense[v])
        .collect();
    let min_train_all: Vec<usize> = split
        .train
        .iter()
        .filter(|&&v| dataset.labels.label(v) == Some(min))
        .map(|&v| dense[v])
        .collect();
    if maj_train.is_empty() {
        return Err(AugmentError::Capacity("majority class has no train nodes".into()));
    }
    let want_min = (maj_train.len() * ratio_r).div_ceil(10);
    if min_train_all.len() < want_min {
        return Err(AugmentError::Capacity(format!(
            "minority class has {} train nodes, ratio 10:{ratio_r} needs {want_min}",
            min_train_all.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = min_train_all;
    pool.shuffle(&mut rng);
    let mut train = maj_train;
    train.extend_from_slice(&pool[..want_min]);
    train.sort_unstable();
    let in_train: std::collections::HashSet<usize> = train.iter().copied().collect();

    let mut val = Vec::new();
    let mut test = Vec::new();
    for v in 0..graph.n_nodes() {
        if in_train.contains(&v) {
            continue;
        }
        match labels.label(v) {
            Some(1) => test.push(v),
            Some(0) => val.push(v),
            _ => {}
        }
    }
    if test.is_empty() {
        return Err(AugmentError::Capacity("no held-out minority nodes to test on".into()));
    }
    Ok((
        Dataset { graph, features, labels, original_ids },
        Split { train, val, test },
    ))
}

/// Clone minority categories (mode AP unless configured otherwise) until
/// the largest-to-smallest train-count ratio is at most `target_ratio`.
#[allow(clippy::too_many_arguments)]
pub fn rebalance_all(
    dataset: &Dataset,
    split: &Split,
    target_ratio: f64,
    mode: AugmentMode,
    rep: &RepresentativeSet,
    p_a: f64,
    wiring: CloneWiring,
    seed: u64,
) -> Result<(Dataset, Split)> {
    if target_ratio < 1.0 {
        return Err(AugmentError::Contract(format!(
            "target ratio must be >= 1, got {target_ratio}"
        )));
    }
    let c = dataset.labels.n_classes();
    let mut counts = vec![0usize; c];
    for &v in &split.train {
        if let Some(l) = dataset.labels.label(v) {
            counts[l as usize] += 1;
        }
    }
    let max_count = *counts.iter().max().unwrap_or(&0);
    if max_count == 0 {
        return Err(AugmentError::Capacity("empty train set".into()));
    }
    let target = (max_count as f64 / target_ratio).ceil() as usize;

    let mut ds = dataset.clone();
    let mut sp = split.clone();
    for class in 0..c {
        if counts[class] == 0 || counts[class] >= target {
            continue;
        }
        let need = target - counts[class];
        let (next_ds, next_sp) = clone_nodes(
            &ds,
            &sp,
            class as u16,
            need,
            mode,
            rep,
            p_a,
            wiring,
            split_seed(seed, class as u64 + 1),
        )?;
        ds = next_ds;
        sp = next_sp;
    }
    Ok((ds, sp))
}

#[cfg(test)]
mod tests;
