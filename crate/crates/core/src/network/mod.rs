//! The dual-attention network: node attention branch, per-head branch
//! combination, gated multi-head layers, loss, trainer, evaluator, and
//! complexity accounting.

mod flops;
mod train;

pub use flops::{count_flops, count_params, GraphStats};
pub use train::{evaluate, train, EpochRecord, History, Metrics, PerClassAccuracy};

use crate::fab::{
    fab_forward_with, CategoryPartition, FabError, FabOptions, FabStructure, FeatureAttention,
};
use crate::graph::{Graph, GraphError, LabelSet, Split};
use crate::tensor::{split_seed, xavier_init, NodeId, Tape, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged { epoch: usize, source: TensorError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Fab(#[from] FabError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    /// Hidden width d (every head of a hidden layer outputs d).
    pub hidden: usize,
    /// Head count per layer.
    pub heads: usize,
    /// Graph feature pooling filter size s (stride equals filter size).
    pub pool_size: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub seed: u64,
    pub epochs: usize,
    pub patience: usize,
    /// Replace the feature attention branch with all-ones
    /// (graph-attention-only baseline).
    pub ablate_fab: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 8,
            pool_size: 2,
            dropout: 0.5,
            leaky_slope: 0.2,
            seed: 0,
            epochs: 1000,
            patience: 100,
            ablate_fab: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(NetworkError::Contract("layers must be >= 1".into()));
        }
        if self.heads == 0 {
            return Err(NetworkError::Contract("heads must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(NetworkError::Contract("hidden width must be >= 1".into()));
        }
        if self.pool_size == 0 {
            return Err(NetworkError::Contract("pool size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NetworkError::Contract(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// (input width, output width) of layer `l` for the given data dims.
    pub(crate) fn layer_dims(&self, l: usize, n_features: usize, n_classes: usize) -> (usize, usize) {
        let f_in = if l == 0 { n_features } else { self.hidden };
        let d_out = if l + 1 == self.layers { n_classes } else { self.hidden };
        (f_in, d_out)
    }
}

/// One attention head: shared NAB projection, edge-attention vector,
/// FAB projection, per-category score weights, and the combine
/// projection.
#[derive(Debug, Clone)]
pub struct HeadParams {
    /// F_in x d projection feeding the node attention branch.
    pub w_n: Tensor,
    /// 2d x 1 edge-attention vector; the first half scores the center
    /// node, the second half the neighbor.
    pub attn: Tensor,
    /// F_in x d projection feeding the feature attention branch.
    pub w_f: Tensor,
    /// C x F_in per-category feature score weights.
    pub theta: Tensor,
    /// d x d combine projection.
    pub w_o: Tensor,
}

/// One layer: its heads plus a learnable gate scalar per head
/// (initialized to 1).
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    pub gates: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub n_features: usize,
    pub n_classes: usize,
    pub layers: Vec<LayerParams>,
}

impl Model {
    pub fn new(config: ModelConfig, n_features: usize, n_classes: usize) -> Result<Self> {
        config.validate()?;
        if n_features == 0 || n_classes < 2 {
            return Err(NetworkError::Contract(format!(
                "need F >= 1 and C >= 2, got F={n_features} C={n_classes}"
            )));
        }
        let mut tensor_seed = 0u64;
        let mut next_seed = || {
            tensor_seed += 1;
            split_seed(config.seed, tensor_seed)
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let (f_in, d_out) = config.layer_dims(l, n_features, n_classes);
            let mut heads = Vec::with_capacity(config.heads);
            for _ in 0..config.heads {
                // theta starts at zero so every category's feature
                // attention opens uniform; projections are Xavier.
                heads.push(HeadParams {
                    w_n: xavier_init(f_in, d_out, next_seed())?,
                    attn: xavier_init(2 * d_out, 1, next_seed())?,
                    w_f: xavier_init(f_in, d_out, next_seed())?,
                    theta: Tensor::zeros(n_classes, f_in).requires_grad(true),
                    w_o: xavier_init(d_out, d_out, next_seed())?,
                });
            }
            let gates = Tensor::filled(config.heads, 1, 1.0).requires_grad(true);
            layers.push(LayerParams { heads, gates });
        }
        Ok(Model { config, n_features, n_classes, layers })
    }

    /// Canonical parameter order: per layer, per head `w_n, attn, w_f,
    /// theta, w_o`, then the layer's gates.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for h in 0..layer.heads.len() {
                for t in ["w_n", "attn", "w_f", "theta", "w_o"] {
                    names.push(format!("layer{l}.head{h}.{t}"));
                }
            }
            names.push(format!("layer{l}.gates"));
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for head in &layer.heads {
                out.extend([&head.w_n, &head.attn, &head.w_f, &head.theta, &head.w_o]);
            }
            out.push(&layer.gates);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                out.extend([
                    &mut head.w_n,
                    &mut head.attn,
                    &mut head.w_f,
                    &mut head.theta,
                    &mut head.w_o,
                ]);
            }
            out.push(&mut layer.gates);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Rebuild a model from named checkpoint tensors (order, names, and
    /// shapes must match the config/data dims).
    pub fn from_checkpoint(
        config: ModelConfig,
        n_features: usize,
        n_classes: usize,
        tensors: &[(String, Tensor)],
    ) -> Result<Self> {
        let mut model = Model::new(config, n_features, n_classes)?;
        let names = model.param_names();
        if names.len() != tensors.len() {
            return Err(NetworkError::Contract(format!(
                "checkpoint has {} tensors, model needs {}",
                tensors.len(),
                names.len()
            )));
        }
        for ((expect, slot), (name, tensor)) in
            names.iter().zip(model.params_mut()).zip(tensors)
        {
            if expect != name {
                return Err(NetworkError::Contract(format!(
                    "checkpoint tensor {name} where {expect} was expected"
                )));
            }
            if tensor.shape() != slot.shape() {
                return Err(NetworkError::Contract(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor.clone().requires_grad(true);
        }
        Ok(model)
    }
}

/// Forward execution mode. Dropout only fires in `Train`; the seed keys
/// every dropout site deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

/// Per-layer attention snapshots kept for inspection.
#[derive(Debug, Clone)]
pub struct AttentionState {
    pub layers: Vec<LayerAttention>,
}

#[derive(Debug, Clone)]
pub struct LayerAttention {
    /// Per head: β per edge, aligned with the graph's canonical edge
    /// order (summing to 1 over each node's in-edges).
    pub betas: Vec<Vec<f64>>,
    /// Per head: learned α per category.
    pub alphas: Vec<FeatureAttention>,
    /// Mask ones per channel per category; the mask is head-independent.
    pub mask_ones: Vec<Vec<usize>>,
}

impl AttentionState {
    /// Head-averaged α per category for one layer.
    pub fn mean_alpha(&self, layer: usize) -> Vec<Vec<f64>> {
        let la = &self.layers[layer];
        let heads = la.alphas.len() as f64;
        let c = la.alphas[0].n_categories();
        let f = la.alphas[0].n_features();
        let mut out = vec![vec![0.0; f]; c];
        for fa in &la.alphas {
            for (cat, row) in out.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += fa.alpha(cat)[j] / heads;
                }
            }
        }
        out
    }
}

pub struct NabOutput {
    pub out: NodeId,
    /// Per-edge attention coefficients (pre-dropout), canonical edge
    /// order.
    pub beta: Vec<f64>,
}

/// Node attention branch over the graph's in-edges. Requires self-loops
/// so every node attends to at least itself.
pub fn nab_forward(
    tape: &mut Tape,
    h: NodeId,
    graph: &Graph,
    w_n: NodeId,
    attn: NodeId,
    slope: f64,
    beta_dropout: Option<(f64, u64)>,
) -> Result<NabOutput> {
    if !graph.has_self_loops() {
        return Err(NetworkError::Contract(
            "node attention requires self-loops (call add_self_loops first)".into(),
        ));
    }
    let (n, _) = tape.dims(h);
    if n != graph.n_nodes() {
        return Err(NetworkError::Contract(format!(
            "{n} feature rows for a {}-node graph",
            graph.n_nodes()
        )));
    }
    let (two_d, one) = tape.dims(attn);
    if one != 1 || two_d % 2 != 0 {
        return Err(NetworkError::Contract(format!(
            "edge-attention vector must be (2d, 1), got ({two_d}, {one})"
        )));
    }
    let d = two_d / 2;

    let proj = tape.matmul(h, w_n)?;
    let a_center = tape.slice(attn, 0, 0, d)?;
    let a_neigh = tape.slice(attn, 0, d, d)?;
    let f_center = tape.matmul(proj, a_center)?; // (N,1)
    let g_neigh = tape.matmul(proj, a_neigh)?; // (N,1)

    let srcs = graph.edge_sources();
    let offsets = graph.in_edge_offsets();
    let mut dsts = Vec::with_capacity(graph.n_edges());
    for v in 0..graph.n_nodes() {
        dsts.extend(std::iter::repeat(v).take(offsets[v + 1] - offsets[v]));
    }

    let f_e = tape.gather_rows(f_center, &dsts)?;
    let g_e = tape.gather_rows(g_neigh, &srcs)?;
    let scores = tape.add(f_e, g_e)?;
    let scores = tape.leaky_relu(scores, slope)?;
    let beta = tape.segment_softmax(scores, offsets)?;
    let beta_vals = tape.value(beta).to_vec();
    let beta_used = match beta_dropout {
        Some((p, seed)) => tape.dropout(beta, p, true, seed)?,
        None => beta,
    };
    let msgs = tape.gather_rows(proj, &srcs)?;
    let weighted = tape.scale_rows(msgs, beta_used)?;
    let agg = tape.segment_sum_rows(weighted, offsets)?;
    let out = tape.elu(agg)?;
    Ok(NabOutput { out, beta: beta_vals })
}

/// Element-wise interaction of the two branches followed by the combine
/// projection; hidden layers apply ELU, the final layer stays linear so
/// it can emit raw logits.
pub fn combine_head(
    tape: &mut Tape,
    nab_out: NodeId,
    fab_out: NodeId,
    w_o: NodeId,
    last_layer: bool,
) -> Result<NodeId> {
    let prod = tape.elementwise_mul(nab_out, fab_out)?;
    let projected = tape.matmul(prod, w_o)?;
    if last_layer {
        Ok(projected)
    } else {
        Ok(tape.elu(projected)?)
    }
}

/// Gated head average: `(1/ζ) Σ c_k h_k`, ELU except in the final layer.
pub fn multi_head(
    tape: &mut Tape,
    head_outputs: &[NodeId],
    gates: NodeId,
    last_layer: bool,
) -> Result<NodeId> {
    if head_outputs.is_empty() {
        return Err(NetworkError::Contract("multi_head needs at least one head".into()));
    }
    let mut acc: Option<NodeId> = None;
    for (k, &h) in head_outputs.iter().enumerate() {
        let gate = tape.slice(gates, 0, k, 1)?;
        let gated = tape.scale_by(h, gate)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, gated)?,
            None => gated,
        });
    }
    let avg = tape.scalar_scale(acc.unwrap(), 1.0 / head_outputs.len() as f64)?;
    if last_layer {
        Ok(avg)
    } else {
        Ok(tape.elu(avg)?)
    }
}

/// Everything a forward pass leaves behind: the logits node, the bound
/// parameter leaves (in canonical order), and the attention snapshots.
pub struct ForwardPass {
    pub logits: NodeId,
    pub bound_params: Vec<NodeId>,
    pub state: AttentionState,
}

/// Run the full layer stack. The graph must carry self-loops; the
/// partition must come from the training split of the same dataset.
pub fn model_forward(
    tape: &mut Tape,
    model: &Model,
    graph: &Graph,
    features: &Tensor,
    partition: &CategoryPartition,
    mode: Mode,
) -> Result<ForwardPass> {
    if features.rows() != graph.n_nodes() || features.cols() != model.n_features {
        return Err(NetworkError::Contract(format!(
            "features are {}x{}, expected {}x{}",
            features.rows(),
            features.cols(),
            graph.n_nodes(),
            model.n_features
        )));
    }
    let p = model.config.dropout;
    let mut site = 0u64;
    let mut next_site = || {
        site += 1;
        site
    };

    let mut h = tape.constant(features);
    let mut bound = Vec::new();
    let mut state = AttentionState { layers: Vec::with_capacity(model.config.layers) };
    for (l, layer) in model.layers.iter().enumerate() {
        let last = l + 1 == model.config.layers;
        let h_in = match mode {
            Mode::Train { dropout_seed } => {
                tape.dropout(h, p, true, split_seed(dropout_seed, next_site()))?
            }
            Mode::Eval => h,
        };
        let (_, f_in) = tape.dims(h_in);
        let structure = if model.config.ablate_fab {
            None
        } else {
            Some(FabStructure::build(
                tape.value(h_in),
                f_in,
                partition,
                model.config.pool_size,
            )?)
        };

        let mut head_outs = Vec::with_capacity(layer.heads.len());
        let mut betas = Vec::with_capacity(layer.heads.len());
        let mut alphas = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let w_n = tape.leaf(&head.w_n);
            let attn = tape.leaf(&head.attn);
            let w_f = tape.leaf(&head.w_f);
            let theta = tape.leaf(&head.theta);
            let w_o = tape.leaf(&head.w_o);
            bound.extend([w_n, attn, w_f, theta, w_o]);

            let beta_drop = match mode {
                Mode::Train { dropout_seed } if p > 0.0 => {
                    Some((p, split_seed(dropout_seed, next_site())))
                }
                _ => None,
            };
            let nab = nab_forward(
                tape,
                h_in,
                graph,
                w_n,
                attn,
                model.config.leaky_slope,
                beta_drop,
            )?;
            let (fab_out, alpha) = match &structure {
                None => {
                    let (_, d_out) = tape.dims(nab.out);
                    let ones = Tensor::filled(graph.n_nodes(), d_out, 1.0);
                    let fa = FeatureAttention::uniform_set(model.n_classes, f_in);
                    (tape.constant(&ones), fa)
                }
                Some(structure) => {
                    let alpha_drop = match mode {
                        Mode::Train { dropout_seed } if p > 0.0 => {
                            Some((p, split_seed(dropout_seed, next_site())))
                        }
                        _ => None,
                    };
                    let opts = FabOptions {
                        pool_size: model.config.pool_size,
                        leaky_slope: model.config.leaky_slope,
                        dropout: alpha_drop,
                    };
                    let out =
                        fab_forward_with(tape, h_in, w_f, theta, partition, structure, &opts)?;
                    (out.out, out.attention)
                }
            };
            let combined = combine_head(tape, nab.out, fab_out, w_o, last)?;
            head_outs.push(combined);
            betas.push(nab.beta);
            alphas.push(alpha);
        }
        let gates = tape.leaf(&layer.gates);
        bound.push(gates);
        h = multi_head(tape, &head_outs, gates, last)?;
        state.layers.push(LayerAttention {
            betas,
            alphas,
            mask_ones: structure.as_ref().map(|s| s.mask_ones()).unwrap_or_default(),
        });
    }
    Ok(ForwardPass { logits: h, bound_params: bound, state })
}

/// Mean cross-entropy of the masked nodes (all of which must be labeled).
pub fn loss(
    tape: &mut Tape,
    logits: NodeId,
    labels: &LabelSet,
    train_mask: &[usize],
) -> Result<NodeId> {
    if train_mask.is_empty() {
        return Err(NetworkError::Contract("loss over an empty train mask".into()));
    }
    let targets = targets_of(labels, train_mask)?;
    Ok(tape.cross_entropy(logits, &targets, train_mask)?)
}

pub(crate) fn targets_of(labels: &LabelSet, mask: &[usize]) -> Result<Vec<usize>> {
    let mut targets = vec![0usize; labels.labels().len()];
    for &v in mask {
        match labels.label(v) {
            Some(l) => targets[v] = l as usize,
            None => {
                return Err(NetworkError::Contract(format!(
                    "node {v} in the loss mask is unlabeled"
                )))
            }
        }
    }
    Ok(targets)
}

/// Build the category partition a model forward needs.
pub fn build_partition(labels: &LabelSet, split: &Split, n_nodes: usize) -> CategoryPartition {
    crate::fab::partition_by_category(labels, split, n_nodes)
}
