//! Machine-readable run artifacts: the training pipeline that produces
//! them, the metrics/attention JSON schemas, and helpers for
//! byte-comparing reports modulo the wall-clock field.
//!
//! JSON field order follows struct declaration order and `f64` values
//! serialize via shortest round-trip, so identical runs produce
//! byte-identical documents.

use crate::graph::{add_self_loops, Dataset, SbmSpec, Split};
use crate::network::{
    self, build_partition, count_flops, count_params, evaluate, model_forward, train,
    AttentionState, GraphStats, Metrics, Mode, Model, ModelConfig, NetworkError,
};
use crate::tensor::{AdamConfig, Tape, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Files { nodes: String, edges: String, undirected: bool },
    Sbm { spec: SbmSpec },
}

/// How the train/val/test split was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub per_class_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// Everything a run resolved to; a manifest with these settings
/// reproduces the run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub data: DataSource,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub optim: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub settings: RunSettings,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    pub test_metrics: Metrics,
    pub mflops: f64,
    pub n_params: usize,
    /// Kept last so determinism comparisons can drop exactly one line.
    pub wall_clock_seconds: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Drop the wall-clock line so two reports can be compared byte for
/// byte. The result is comparison text, not necessarily valid JSON.
pub fn without_wall_clock(json: &str) -> String {
    json.lines()
        .filter(|l| !l.contains("\"wall_clock_seconds\""))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One record of the per-layer attention dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDumpEntry {
    pub category: usize,
    /// Head-averaged attention over feature dimensions.
    pub alpha: Vec<f64>,
    pub mask_ones_per_channel: Vec<usize>,
}

/// The attention dump: per layer, one entry per learned category.
pub fn attention_dump(state: &AttentionState) -> Vec<Vec<AttentionDumpEntry>> {
    state
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let mean = state.mean_alpha(l);
            mean.into_iter()
                .enumerate()
                .map(|(category, alpha)| AttentionDumpEntry {
                    category,
                    alpha,
                    mask_ones_per_channel: layer
                        .mask_ones
                        .get(category)
                        .cloned()
                        .unwrap_or_default(),
                })
                .collect()
        })
        .collect()
}

/// A finished training run: the trained model, its attention snapshots
/// from a final evaluation pass, and the metrics report.
pub struct TrainOutcome {
    pub model: Model,
    pub state: AttentionState,
    pub report: MetricsReport,
}

/// Train on the dataset per the settings and assemble every artifact the
/// CLI emits. Deterministic given the settings.
pub fn train_and_report(
    dataset: &Dataset,
    split: &Split,
    settings: &RunSettings,
) -> network::Result<TrainOutcome> {
    let started = std::time::Instant::now();
    let graph = add_self_loops(&dataset.graph);
    let features = features_tensor(dataset);
    let mut model = Model::new(
        settings.model,
        dataset.features.n_features(),
        dataset.labels.n_classes(),
    )?;
    let history = train(
        &mut model,
        &graph,
        &features,
        &dataset.labels,
        split,
        settings.optim,
    )?;

    let partition = build_partition(&dataset.labels, split, graph.n_nodes());
    let mut tape = Tape::new();
    let pass = model_forward(&mut tape, &model, &graph, &features, &partition, Mode::Eval)?;

    let eval_nodes = if split.test.is_empty() { &split.train } else { &split.test };
    let test_metrics = evaluate(&model, &graph, &features, &dataset.labels, split, eval_nodes)?;

    let stats = GraphStats::from_dataset(dataset);
    let report = MetricsReport {
        seed: settings.model.seed,
        settings: settings.clone(),
        epochs_run: history.epochs.len(),
        best_epoch: history.best_epoch,
        train_loss: history.epochs.iter().map(|e| e.train_loss).collect(),
        val_acc: history.epochs.iter().map(|e| e.val_acc).collect(),
        test_metrics,
        mflops: count_flops(&settings.model, &stats)?,
        n_params: count_params(&settings.model, &stats)?,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { model, state: pass.state, report })
}

pub fn features_tensor(ds: &Dataset) -> Tensor {
    Tensor::from_vec(
        ds.features.n_nodes(),
        ds.features.n_features(),
        ds.features.values().to_vec(),
    )
    .expect("feature matrix is well-formed")
}

/// Named tensors of a model in canonical order, ready for
/// `save_checkpoint`.
pub fn named_tensors(model: &Model) -> Vec<(String, Tensor)> {
    model
        .param_names()
        .into_iter()
        .zip(model.params().into_iter().cloned())
        .collect()
}

/// Inverse of `named_tensors` + `save_checkpoint`: rebuild the model.
pub fn model_from_tensors(
    config: ModelConfig,
    n_features: usize,
    n_classes: usize,
    tensors: &[(String, Tensor)],
) -> std::result::Result<Model, NetworkError> {
    Model::from_checkpoint(config, n_features, n_classes, tensors)
}
