//! Full-batch trainer with early stopping, plus the evaluator.

use super::{build_partition, loss, model_forward, targets_of, Mode, Model, NetworkError, Result};
use crate::graph::{Graph, LabelSet, Split};
use crate::tensor::{split_seed, AdamConfig, AdamState, Tape, Tensor, TensorError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (best validation accuracy).
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassAccuracy {
    pub class: usize,
    pub n: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class: Vec<PerClassAccuracy>,
    pub macro_ap: f64,
    pub n_nodes: usize,
}

/// Full-batch training with the adaptive-moment optimizer and early
/// stopping on validation accuracy. The best-validation parameters are
/// restored into the model at the end. Deterministic in the model seed.
///
/// With an empty validation set, training accuracy stands in for the
/// early-stopping signal.
pub fn train(
    model: &mut Model,
    graph: &Graph,
    features: &Tensor,
    labels: &LabelSet,
    split: &Split,
    optim: AdamConfig,
) -> Result<History> {
    if split.train.is_empty() {
        return Err(NetworkError::Contract("training requires a nonempty train set".into()));
    }
    split.validate(labels)?;
    let partition = build_partition(labels, split, graph.n_nodes());
    let mut adam = AdamState::new(optim, &model.params());
    let mut history = History { epochs: Vec::new(), best_epoch: 0 };
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut since_best = 0usize;
    let seed = model.config.seed;
    let epochs = model.config.epochs;

    for epoch in 0..epochs {
        let diverged = |e: NetworkError| match e {
            NetworkError::Tensor(t @ TensorError::NonFinite { .. }) => {
                NetworkError::Diverged { epoch, source: t }
            }
            NetworkError::Fab(crate::fab::FabError::Tensor(t @ TensorError::NonFinite { .. })) => {
                NetworkError::Diverged { epoch, source: t }
            }
            other => other,
        };

        let mut tape = Tape::new();
        let mode = Mode::Train { dropout_seed: split_seed(seed, 0x7271 ^ epoch as u64) };
        let pass =
            model_forward(&mut tape, model, graph, features, &partition, mode).map_err(diverged)?;
        let loss_node = loss(&mut tape, pass.logits, labels, &split.train).map_err(diverged)?;
        let train_loss = tape.value(loss_node)[0];
        tape.backward(loss_node)?;
        {
            let mut params = model.params_mut();
            for (param, node) in params.iter_mut().zip(&pass.bound_params) {
                let g = tape
                    .grad(*node)
                    .ok_or_else(|| NetworkError::Contract("parameter missing gradient".into()))?;
                param.set_grad(g.to_vec())?;
            }
            adam.step(&mut params)?;
        }

        let probe = if split.val.is_empty() { &split.train } else { &split.val };
        let val_acc = accuracy(model, graph, features, labels, split, probe)?;
        history.epochs.push(EpochRecord { train_loss, val_acc });

        let improved = best.as_ref().map_or(true, |(b, _)| val_acc > *b);
        if improved {
            best = Some((val_acc, model.params().into_iter().cloned().collect()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > model.config.patience {
                break;
            }
        }
    }

    if let Some((_, snapshot)) = best {
        for (slot, saved) in model.params_mut().into_iter().zip(snapshot) {
            *slot = saved;
        }
    }
    Ok(history)
}

fn accuracy(
    model: &Model,
    graph: &Graph,
    features: &Tensor,
    labels: &LabelSet,
    split: &Split,
    nodes: &[usize],
) -> Result<f64> {
    let m = evaluate(model, graph, features, labels, split, nodes)?;
    Ok(m.accuracy)
}

/// Argmax accuracy, per-class accuracy, and macro average precision over
/// the given labeled nodes.
pub fn evaluate(
    model: &Model,
    graph: &Graph,
    features: &Tensor,
    labels: &LabelSet,
    split: &Split,
    nodes: &[usize],
) -> Result<Metrics> {
    if nodes.is_empty() {
        return Err(NetworkError::Contract("evaluate over an empty node set".into()));
    }
    let targets = targets_of(labels, nodes)?;
    let partition = build_partition(labels, split, graph.n_nodes());
    let mut tape = Tape::new();
    let pass = model_forward(&mut tape, model, graph, features, &partition, Mode::Eval)?;
    let logits = tape.value(pass.logits);
    let c = model.n_classes;

    let mut correct = 0usize;
    let mut class_n = vec![0usize; c];
    let mut class_correct = vec![0usize; c];
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(nodes.len());
    for &v in nodes {
        let row = &logits[v * c..(v + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        scores.push(exps.iter().map(|e| e / z).collect());
        let pred = argmax(row);
        let truth = targets[v];
        class_n[truth] += 1;
        if pred == truth {
            correct += 1;
            class_correct[truth] += 1;
        }
    }

    let per_class: Vec<PerClassAccuracy> = (0..c)
        .filter(|&k| class_n[k] > 0)
        .map(|k| PerClassAccuracy {
            class: k,
            n: class_n[k],
            accuracy: class_correct[k] as f64 / class_n[k] as f64,
        })
        .collect();

    let mut ap_sum = 0.0;
    let mut ap_classes = 0usize;
    for k in 0..c {
        if class_n[k] == 0 {
            continue;
        }
        ap_sum += average_precision(nodes, &scores, &targets, k);
        ap_classes += 1;
    }

    Ok(Metrics {
        accuracy: correct as f64 / nodes.len() as f64,
        per_class,
        macro_ap: ap_sum / ap_classes.max(1) as f64,
        n_nodes: nodes.len(),
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One-vs-rest average precision from softmax scores: mean of
/// precision-at-k over the positive hits, ranked by descending score
/// (ties by ascending node id).
fn average_precision(
    nodes: &[usize],
    scores: &[Vec<f64>],
    targets: &[usize],
    class: usize,
) -> f64 {
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b][class]
            .total_cmp(&scores[a][class])
            .then_with(|| nodes[a].cmp(&nodes[b]))
    });
    let n_pos = order.iter().filter(|&&i| targets[nodes[i]] == class).count();
    if n_pos == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if targets[nodes[i]] == class {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    ap / n_pos as f64
}
