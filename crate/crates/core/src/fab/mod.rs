//! Feature Attention Branch: category partition, similarity sort, the
//! pooling/upsampling feature filter, and category-oriented attention
//! over feature dimensions.
//!
//! Per category the pipeline is: gather the sub-feature matrix, sort rows
//! by cosine similarity to the category mean, lay the rows out as a
//! square feature map, max-pool it, and upsample back with a 0/1 mask
//! marking where the pooled maxima came from. Only masked entries feed
//! the attention scores, so the scoring cost per channel equals the mask
//! ones count. Sorting and argmax selection are recomputed from current
//! values each forward pass and treated as constants by the tape;
//! gradients flow through the selected values only.

use crate::graph::{LabelSet, Split};
use crate::tensor::{canonical_sum, NodeId, Tape, Tensor, TensorError};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, FabError>;

#[derive(Debug, Error)]
pub enum FabError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// C train-label groups plus one passthrough group holding every node
/// without a training label. Together the groups partition `[0, N)`.
#[derive(Debug, Clone)]
pub struct CategoryPartition {
    groups: Vec<Vec<usize>>,
    category_of: Vec<usize>,
    n_classes: usize,
}

impl CategoryPartition {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Group `c < C` holds train nodes labeled `c`; group `C` is the
    /// passthrough group.
    pub fn group(&self, c: usize) -> &[usize] {
        &self.groups[c]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Category index per node (label for train nodes, `C` otherwise).
    pub fn category_of(&self) -> &[usize] {
        &self.category_of
    }
}

pub fn partition_by_category(labels: &LabelSet, split: &Split, n_nodes: usize) -> CategoryPartition {
    let c = labels.n_classes();
    let mut groups = vec![Vec::new(); c + 1];
    let mut category_of = vec![c; n_nodes];
    let mut in_train = vec![false; n_nodes];
    for &v in &split.train {
        in_train[v] = true;
    }
    for v in 0..n_nodes {
        if in_train[v] {
            if let Some(l) = labels.label(v) {
                groups[l as usize].push(v);
                category_of[v] = l as usize;
                continue;
            }
        }
        groups[c].push(v);
    }
    CategoryPartition { groups, category_of, n_classes: c }
}

/// Borrowed row-major matrix view used to hand tape values to the
/// structural (non-differentiated) part of the pipeline.
pub struct RowView<'a> {
    pub data: &'a [f64],
    pub cols: usize,
}

impl<'a> RowView<'a> {
    pub fn row(&self, r: usize) -> &'a [f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Arithmetic column average of the listed rows. Sums are
/// order-canonicalized so the result is independent of node labeling.
pub fn category_mean(group: &[usize], features: &RowView) -> Vec<f64> {
    let f = features.cols;
    let mut mean = vec![0.0; f];
    let mut buf: Vec<f64> = Vec::with_capacity(group.len());
    for (j, m) in mean.iter_mut().enumerate() {
        buf.clear();
        for &v in group {
            buf.push(features.row(v)[j]);
        }
        *m = canonical_sum(&mut buf) / group.len() as f64;
    }
    mean
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// A category's rows ordered by descending similarity to the category
/// mean (ties broken by ascending node id).
#[derive(Debug, Clone)]
pub struct SortedSubMatrix {
    pub category: usize,
    /// Global node ids in sort order.
    pub perm: Vec<usize>,
    /// m x F rows in perm order.
    pub matrix: Vec<f64>,
    pub n_features: usize,
    pub mean: Vec<f64>,
    pub similarities: Vec<f64>,
}

pub fn sort_by_similarity(category: usize, group: &[usize], features: &RowView) -> SortedSubMatrix {
    let mean = category_mean(group, features);
    let mut with_sim: Vec<(usize, f64)> =
        group.iter().map(|&v| (v, cosine_sim(&mean, features.row(v)))).collect();
    with_sim.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let f = features.cols;
    let mut matrix = Vec::with_capacity(with_sim.len() * f);
    let mut perm = Vec::with_capacity(with_sim.len());
    let mut similarities = Vec::with_capacity(with_sim.len());
    for &(v, s) in &with_sim {
        matrix.extend_from_slice(features.row(v));
        perm.push(v);
        similarities.push(s);
    }
    SortedSubMatrix { category, perm, matrix, n_features: f, mean, similarities }
}

/// Square feature map with channel depth F. Row `r` of the 2D sub-matrix
/// lands at cell `(r / k, r % k)`; cells with linear index >= m are zero
/// padding in every channel.
#[derive(Debug, Clone)]
pub struct FeatureMap3D {
    k: usize,
    depth: usize,
    m: usize,
    buffer: Vec<f64>,
}

impl FeatureMap3D {
    pub fn side(&self) -> usize {
        self.k
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn real_rows(&self) -> usize {
        self.m
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.buffer[(row * self.k + col) * self.depth + ch]
    }
}

pub fn to_feature_map(sorted: &SortedSubMatrix) -> FeatureMap3D {
    let m = sorted.perm.len();
    let f = sorted.n_features;
    let k = (m as f64).sqrt().ceil() as usize;
    let mut buffer = vec![0.0; k * k * f];
    buffer[..m * f].copy_from_slice(&sorted.matrix);
    FeatureMap3D { k, depth: f, m, buffer }
}

/// Max-pool output: `windows x windows` values per channel plus the
/// linear 2D cell index each max came from. Windows tile the plane with
/// stride = filter size, using ceiling coverage so edge cells are never
/// dropped. Only real (non-padding) cells compete, with ties resolved to
/// the lowest row-major index; a window with no real cells has no argmax.
#[derive(Debug, Clone)]
pub struct PooledMap {
    pub windows: usize,
    pub depth: usize,
    /// values[(wr * windows + wc) * depth + ch]
    pub values: Vec<f64>,
    /// argmax[(wr * windows + wc) * depth + ch] = linear cell index.
    pub argmax: Vec<Option<u32>>,
}

pub fn max_pool(map: &FeatureMap3D, s: usize) -> Result<PooledMap> {
    if s == 0 {
        return Err(FabError::Contract("pool size must be >= 1".into()));
    }
    let k = map.k;
    let windows = k.div_ceil(s);
    let depth = map.depth;
    let mut values = vec![0.0; windows * windows * depth];
    let mut argmax: Vec<Option<u32>> = vec![None; windows * windows * depth];
    for wr in 0..windows {
        for wc in 0..windows {
            let widx = wr * windows + wc;
            for ch in 0..depth {
                let mut best: Option<(f64, u32)> = None;
                for r in wr * s..((wr + 1) * s).min(k) {
                    for c in wc * s..((wc + 1) * s).min(k) {
                        let cell = r * k + c;
                        if cell >= map.m {
                            continue; // padding
                        }
                        let v = map.buffer[cell * depth + ch];
                        match best {
                            Some((bv, _)) if v <= bv => {}
                            _ => best = Some((v, cell as u32)),
                        }
                    }
                }
                if let Some((v, cell)) = best {
                    values[widx * depth + ch] = v;
                    argmax[widx * depth + ch] = Some(cell);
                }
            }
        }
    }
    Ok(PooledMap { windows, depth, values, argmax })
}

/// 0/1 matrix marking the representative positions of an m x F
/// sub-matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    m: usize,
    f: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn get(&self, row: usize, ch: usize) -> bool {
        self.bits[row * self.f + ch] != 0
    }

    pub fn ones_per_channel(&self) -> Vec<usize> {
        let mut ones = vec![0usize; self.f];
        for r in 0..self.m {
            for j in 0..self.f {
                if self.bits[r * self.f + j] != 0 {
                    ones[j] += 1;
                }
            }
        }
        ones
    }

    pub fn total_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }
}

/// Scatter pooled maxima back to an m x F matrix (zeros elsewhere) and
/// record their positions in a mask.
pub fn upsample_with_mask(pool: &PooledMap, k: usize, m: usize) -> Result<(Vec<f64>, Mask)> {
    let f = pool.depth;
    let mut recovered = vec![0.0; m * f];
    let mut bits = vec![0u8; m * f];
    for (slot, am) in pool.argmax.iter().enumerate() {
        if let Some(cell) = *am {
            let cell = cell as usize;
            if cell >= k * k || cell >= m {
                return Err(FabError::Validation(format!(
                    "argmax cell {cell} out of range (k={k}, m={m})"
                )));
            }
            let ch = slot % f;
            recovered[cell * f + ch] = pool.values[slot];
            bits[cell * f + ch] = 1;
        }
    }
    Ok((recovered, Mask { m, f, bits }))
}

/// Reference (non-tape) attention computation: masked column means,
/// per-dimension learnable score through LeakyReLU, softmax across
/// dimensions.
pub fn feature_attention(recovered: &[f64], mask: &Mask, theta: &[f64], slope: f64) -> Vec<f64> {
    let f = mask.f;
    let m = mask.m;
    assert_eq!(recovered.len(), m * f);
    assert_eq!(theta.len(), f);
    let mut scores = vec![0.0; f];
    let mut buf: Vec<f64> = Vec::new();
    for j in 0..f {
        buf.clear();
        for r in 0..m {
            if mask.bits[r * f + j] != 0 {
                buf.push(recovered[r * f + j]);
            }
        }
        let count = buf.len();
        let mu = canonical_sum(&mut buf) / count.max(1) as f64;
        let raw = theta[j] * mu;
        scores[j] = if raw >= 0.0 { raw } else { slope * raw };
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Learned per-category attention vectors over feature dimensions.
/// Exactly `C` vectors exist; the passthrough category uses `1/F`.
#[derive(Debug, Clone)]
pub struct FeatureAttention {
    alphas: Vec<Vec<f64>>,
    n_features: usize,
}

impl FeatureAttention {
    /// Wrap externally computed per-category vectors (e.g. head
    /// averages).
    pub fn from_rows(alphas: Vec<Vec<f64>>, n_features: usize) -> Self {
        debug_assert!(alphas.iter().all(|a| a.len() == n_features));
        FeatureAttention { alphas, n_features }
    }

    /// A C-vector set of uniform attentions (used where no attention was
    /// learned, e.g. the graph-only ablation).
    pub fn uniform_set(n_categories: usize, n_features: usize) -> Self {
        FeatureAttention {
            alphas: vec![vec![1.0 / n_features as f64; n_features]; n_categories],
            n_features,
        }
    }

    pub fn n_categories(&self) -> usize {
        self.alphas.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn alpha(&self, c: usize) -> &[f64] {
        &self.alphas[c]
    }

    pub fn alphas(&self) -> &[Vec<f64>] {
        &self.alphas
    }

    pub fn uniform(&self) -> Vec<f64> {
        vec![1.0 / self.n_features as f64; self.n_features]
    }
}

pub struct FabOptions {
    pub pool_size: usize,
    pub leaky_slope: f64,
    /// `(rate, seed)` when dropout on the attention coefficients is
    /// active (training mode only).
    pub dropout: Option<(f64, u64)>,
}

/// Per-category sort order and representative mask. The structure depends
/// only on the layer input values and the pool size, so within a layer it
/// is shared by every attention head.
pub struct FabStructure {
    categories: Vec<Option<CategoryStructure>>,
    n_features: usize,
}

pub struct CategoryStructure {
    pub perm: Vec<usize>,
    pub mask: Mask,
}

impl FabStructure {
    pub fn build(
        values: &[f64],
        n_features: usize,
        partition: &CategoryPartition,
        pool_size: usize,
    ) -> Result<Self> {
        let view = RowView { data: values, cols: n_features };
        let mut categories = Vec::with_capacity(partition.n_classes());
        for cat in 0..partition.n_classes() {
            let group = partition.group(cat);
            if group.is_empty() {
                categories.push(None);
                continue;
            }
            let sorted = sort_by_similarity(cat, group, &view);
            let map = to_feature_map(&sorted);
            let pooled = max_pool(&map, pool_size)?;
            let (_, mask) = upsample_with_mask(&pooled, map.side(), map.real_rows())?;
            categories.push(Some(CategoryStructure { perm: sorted.perm, mask }));
        }
        Ok(FabStructure { categories, n_features })
    }

    /// Mask ones per channel for each learned category (empty vec for a
    /// skipped category).
    pub fn mask_ones(&self) -> Vec<Vec<usize>> {
        self.categories
            .iter()
            .map(|c| c.as_ref().map(|s| s.mask.ones_per_channel()).unwrap_or_default())
            .collect()
    }
}

pub struct FabOutput {
    /// N x d branch output (after the projection and ELU).
    pub out: NodeId,
    pub attention: FeatureAttention,
    /// Mask ones per channel for each learned category (empty vec for a
    /// category that was skipped).
    pub mask_ones: Vec<Vec<usize>>,
}

/// Full branch forward on the tape. `x` is the N x F layer input, `w_f`
/// the F x d projection, `theta` the C x F per-category score weights.
/// Empty categories are skipped and fall back to uniform attention, as
/// does the passthrough group. Output rows stay in original node order.
pub fn fab_forward(
    tape: &mut Tape,
    x: NodeId,
    w_f: NodeId,
    theta: NodeId,
    partition: &CategoryPartition,
    opts: &FabOptions,
) -> Result<FabOutput> {
    let (_, f) = tape.dims(x);
    let structure = FabStructure::build(tape.value(x), f, partition, opts.pool_size)?;
    fab_forward_with(tape, x, w_f, theta, partition, &structure, opts)
}

/// `fab_forward` with a prebuilt structure (one build serves all heads of
/// a layer).
pub fn fab_forward_with(
    tape: &mut Tape,
    x: NodeId,
    w_f: NodeId,
    theta: NodeId,
    partition: &CategoryPartition,
    structure: &FabStructure,
    opts: &FabOptions,
) -> Result<FabOutput> {
    let (n_nodes, f) = tape.dims(x);
    let (theta_rows, theta_cols) = tape.dims(theta);
    let c = partition.n_classes();
    if theta_rows != c || theta_cols != f {
        return Err(FabError::Contract(format!(
            "theta is {theta_rows}x{theta_cols}, expected {c}x{f}"
        )));
    }
    if partition.category_of().len() != n_nodes || structure.n_features != f {
        return Err(FabError::Contract(format!(
            "partition/structure built for different input than {n_nodes}x{f}"
        )));
    }
    let uniform = Tensor::filled(1, f, 1.0 / f as f64);

    let mut alpha_rows: Vec<NodeId> = Vec::with_capacity(c + 1);
    let mut alphas: Vec<Vec<f64>> = Vec::with_capacity(c);
    for cat in 0..c {
        let Some(cs) = &structure.categories[cat] else {
            alpha_rows.push(tape.constant(&uniform));
            alphas.push(uniform.data().to_vec());
            continue;
        };
        let sub = tape.gather_rows(x, &cs.perm)?;
        let mu = tape.masked_col_mean(sub, cs.mask.bits())?;
        let theta_c = tape.slice(theta, 0, cat, 1)?;
        let prod = tape.elementwise_mul(theta_c, mu)?;
        let scored = tape.leaky_relu(prod, opts.leaky_slope)?;
        let alpha = tape.row_softmax(scored)?;
        alphas.push(tape.value(alpha).to_vec());
        alpha_rows.push(alpha);
    }
    alpha_rows.push(tape.constant(&uniform));

    let alpha_mat = tape.concat(&alpha_rows, 0)?;
    let mut per_node = tape.gather_rows(alpha_mat, partition.category_of())?;
    if let Some((p, seed)) = opts.dropout {
        per_node = tape.dropout(per_node, p, true, seed)?;
    }
    let weighted = tape.elementwise_mul(x, per_node)?;
    let projected = tape.matmul(weighted, w_f)?;
    let out = tape.elu(projected)?;
    Ok(FabOutput {
        out,
        attention: FeatureAttention { alphas, n_features: f },
        mask_ones: structure.mask_ones(),
    })
}
