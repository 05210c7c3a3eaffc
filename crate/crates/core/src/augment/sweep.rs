//! Imbalance ratio sweep: pretrain for representative dimensions, then
//! for each (mode, ratio, seed) cell synthesize clones, retrain, and
//! score the minority-only test set. Cells are independent and run on a
//! small worker pool.

use super::{
    build_two_class_dataset, clone_nodes, representative_from_state, AugmentError, AugmentMode,
    CloneWiring, RepresentativeSet, Result,
};
use crate::graph::{add_self_loops, Dataset, Split};
use crate::network::{build_partition, evaluate, model_forward, train, Mode, Model, ModelConfig};
use crate::tensor::{split_seed, AdamConfig, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// A sweep cell's augmentation strategy: none at all, or one of the four
/// cloning modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepMode {
    None,
    Augment(AugmentMode),
}

impl SweepMode {
    pub fn name(&self) -> &'static str {
        match self {
            SweepMode::None => "none",
            SweepMode::Augment(m) => m.short_name(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("none") {
            Ok(SweepMode::None)
        } else {
            Ok(SweepMode::Augment(AugmentMode::parse(s)?))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    /// Minority-side ratio targets r (train imbalance 10:r).
    pub ratios: Vec<usize>,
    pub modes: Vec<SweepMode>,
    pub seeds: Vec<u64>,
    pub p_a: f64,
    pub wiring: CloneWiring,
    /// Representative threshold; defaults to the uniform level 1/F.
    pub tau: Option<f64>,
    /// Real-node imbalance of the base dataset (default 10:1).
    pub base_ratio: usize,
    pub model: ModelConfig,
    pub optim: AdamConfig,
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            ratios: (1..=10).collect(),
            modes: vec![
                SweepMode::None,
                SweepMode::Augment(AugmentMode::Ori),
                SweepMode::Augment(AugmentMode::AllClean),
                SweepMode::Augment(AugmentMode::PartClean),
                SweepMode::Augment(AugmentMode::Noise),
            ],
            seeds: vec![0, 1, 2, 3, 4],
            p_a: 0.5,
            wiring: CloneWiring::Inherit,
            tau: None,
            base_ratio: 1,
            model: ModelConfig::default(),
            optim: AdamConfig::default(),
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub mode: String,
    pub ratio: usize,
    pub seed: u64,
    pub minority_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub best_ratio: usize,
    pub best_ratio_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub summary: Vec<ModeSummary>,
}

impl SweepReport {
    /// `mode ratio seed minority_accuracy` rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("mode\tratio\tseed\tminority_accuracy\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                c.mode, c.ratio, c.seed, c.minority_accuracy
            ));
        }
        out
    }

    pub fn mode_mean(&self, mode: &str) -> f64 {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.mode == mode)
            .map(|c| c.minority_accuracy)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }
}

struct SeedContext {
    seed: u64,
    base: Dataset,
    base_split: Split,
    rep: RepresentativeSet,
    maj_train: usize,
    min_train: usize,
}

/// Pretrain on the parent dataset (all its classes, its own split) and
/// carry the learned per-category attention into the induced two-class
/// base: representative dimensions come from a model that saw the
/// minority properly, the way the original-data analysis precedes the
/// imbalance experiments.
fn pretrain_seed_context(
    dataset: &Dataset,
    split: &Split,
    maj: u16,
    min: u16,
    cfg: &SweepConfig,
    seed: u64,
) -> Result<SeedContext> {
    let graph = add_self_loops(&dataset.graph);
    let features = features_tensor(dataset);
    let mut model_cfg = cfg.model;
    model_cfg.seed = split_seed(seed, 13);
    let mut model = Model::new(
        model_cfg,
        dataset.features.n_features(),
        dataset.labels.n_classes(),
    )?;
    train(&mut model, &graph, &features, &dataset.labels, split, cfg.optim)?;

    let partition = build_partition(&dataset.labels, split, graph.n_nodes());
    let mut tape = Tape::new();
    let pass = model_forward(&mut tape, &model, &graph, &features, &partition, Mode::Eval)?;
    let tau = cfg.tau.unwrap_or(1.0 / dataset.features.n_features() as f64);
    let parent_rep = representative_from_state(&pass.state, tau);
    // remap to the induced dataset's label space: 0 = majority, 1 = minority
    let rep = RepresentativeSet::from_sets(
        vec![
            parent_rep.dims(maj as usize).to_vec(),
            parent_rep.dims(min as usize).to_vec(),
        ],
        parent_rep.n_features(),
    );

    let (base, base_split) =
        build_two_class_dataset(dataset, split, maj, min, cfg.base_ratio, split_seed(seed, 11))?;
    let maj_train =
        base_split.train.iter().filter(|&&v| base.labels.label(v) == Some(0)).count();
    let min_train =
        base_split.train.iter().filter(|&&v| base.labels.label(v) == Some(1)).count();
    Ok(SeedContext { seed, base, base_split, rep, maj_train, min_train })
}

fn features_tensor(ds: &Dataset) -> Tensor {
    Tensor::from_vec(
        ds.features.n_nodes(),
        ds.features.n_features(),
        ds.features.values().to_vec(),
    )
    .expect("feature matrix is well-formed")
}

fn run_cell(
    ctx: &SeedContext,
    mode: SweepMode,
    ratio: usize,
    cfg: &SweepConfig,
) -> Result<SweepCell> {
    let (ds, sp) = match mode {
        SweepMode::None => (ctx.base.clone(), ctx.base_split.clone()),
        SweepMode::Augment(m) => {
            let target = (ctx.maj_train * ratio).div_ceil(10);
            let need = target.saturating_sub(ctx.min_train);
            if need == 0 {
                (ctx.base.clone(), ctx.base_split.clone())
            } else {
                clone_nodes(
                    &ctx.base,
                    &ctx.base_split,
                    1,
                    need,
                    m,
                    &ctx.rep,
                    cfg.p_a,
                    cfg.wiring,
                    split_seed(ctx.seed, 1000 + ratio as u64),
                )?
            }
        }
    };
    let graph = add_self_loops(&ds.graph);
    let features = features_tensor(&ds);
    let mut model_cfg = cfg.model;
    // one init per (seed, ratio) so modes are compared pairwise
    model_cfg.seed = split_seed(ctx.seed, 2000 + ratio as u64);
    let mut model = Model::new(model_cfg, ds.features.n_features(), 2)?;
    train(&mut model, &graph, &features, &ds.labels, &sp, cfg.optim)?;
    let metrics = evaluate(
        &model,
        &graph,
        &features,
        &ds.labels,
        &sp,
        &ctx.base_split.test,
    )?;
    Ok(SweepCell {
        mode: mode.name().to_string(),
        ratio,
        seed: ctx.seed,
        minority_accuracy: metrics.accuracy,
    })
}

/// Full sweep: per seed, pretrain on the base imbalanced dataset for
/// representative dimensions, then run every (mode, ratio) cell.
pub fn ratio_sweep(
    dataset: &Dataset,
    split: &Split,
    maj: u16,
    min: u16,
    cfg: &SweepConfig,
) -> Result<SweepReport> {
    if cfg.ratios.is_empty() || cfg.modes.is_empty() || cfg.seeds.is_empty() {
        return Err(AugmentError::Contract("sweep needs ratios, modes, and seeds".into()));
    }
    let contexts: Vec<SeedContext> = cfg
        .seeds
        .iter()
        .map(|&seed| pretrain_seed_context(dataset, split, maj, min, cfg, seed))
        .collect::<Result<_>>()?;

    let mut jobs: Vec<(usize, SweepMode, usize)> = Vec::new();
    for (ci, _) in contexts.iter().enumerate() {
        for &mode in &cfg.modes {
            for &ratio in &cfg.ratios {
                jobs.push((ci, mode, ratio));
            }
        }
    }

    let results: Mutex<Vec<Option<Result<SweepCell>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = cfg.jobs.max(1).min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let (ci, mode, ratio) = jobs[i];
                let cell = run_cell(&contexts[ci], mode, ratio, cfg);
                results.lock().unwrap()[i] = Some(cell);
            });
        }
    });

    let mut cells = Vec::with_capacity(jobs.len());
    for slot in results.into_inner().unwrap() {
        cells.push(slot.expect("worker completed every job")?);
    }
    cells.sort_by(|a, b| {
        (a.mode.as_str(), a.ratio, a.seed).cmp(&(b.mode.as_str(), b.ratio, b.seed))
    });

    let summary = summarize(&cells, cfg);
    Ok(SweepReport { cells, summary })
}

fn summarize(cells: &[SweepCell], cfg: &SweepConfig) -> Vec<ModeSummary> {
    cfg.modes
        .iter()
        .map(|mode| {
            let name = mode.name();
            let mut vals: Vec<f64> = cells
                .iter()
                .filter(|c| c.mode == name)
                .map(|c| c.minority_accuracy)
                .collect();
            vals.sort_by(f64::total_cmp);
            let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
            let (mut best_ratio, mut best_mean) = (0usize, f64::NEG_INFINITY);
            for &ratio in &cfg.ratios {
                let rv: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.mode == name && c.ratio == ratio)
                    .map(|c| c.minority_accuracy)
                    .collect();
                let m = rv.iter().sum::<f64>() / rv.len().max(1) as f64;
                if m > best_mean {
                    best_mean = m;
                    best_ratio = ratio;
                }
            }
            ModeSummary {
                mode: name.to_string(),
                mean,
                q1: percentile(&vals, 0.25),
                median: percentile(&vals, 0.5),
                q3: percentile(&vals, 0.75),
                best_ratio,
                best_ratio_mean: best_mean,
            }
        })
        .collect()
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}
