use super::*;
use crate::fab::FeatureAttention;
use crate::graph::{generate_sbm, make_split, SbmSpec};
use crate::network::ModelConfig;
use crate::tensor::AdamConfig;

fn sbm_two_class() -> (Dataset, Split) {
    let spec = SbmSpec {
        n_per_class: 30,
        n_classes: 3,
        p_in: 0.3,
        p_out: 0.05,
        signal_dims_per_class: 3,
        q_hi: 0.8,
        q_lo: 0.1,
        n_features: 12,
        seed: 5,
    };
    let ds = generate_sbm(&spec).unwrap();
    let split = make_split(&ds.labels, 20, 15, 15, 2).unwrap();
    (ds, split)
}

fn rep_none(f: usize, c: usize) -> RepresentativeSet {
    // top-1 fallback sets, one dim each
    extract_representative(
        &FeatureAttention::from_rows(
            (0..c)
                .map(|k| {
                    let mut row = vec![0.0; f];
                    row[k % f] = 1.0;
                    row
                })
                .collect(),
            f,
        ),
        2.0, // impossible threshold → fallback to top-1
    )
}

#[test]
fn representative_uniform_alpha_keeps_every_dimension() {
    // at exactly τ = 1/F the threshold is inclusive
    let fa = FeatureAttention::uniform_set(2, 8);
    let rep = extract_representative(&fa, 1.0 / 8.0);
    for c in 0..2 {
        assert_eq!(rep.dims(c).len(), 8);
    }
}

#[test]
fn representative_one_hot_alpha_keeps_one_dimension() {
    let mut row = vec![0.001; 10];
    row[7] = 1.0 - 0.009;
    let fa = FeatureAttention::from_rows(vec![row], 10);
    let rep = extract_representative(&fa, 0.1);
    assert_eq!(rep.dims(0), &[7]);
}

#[test]
fn representative_empty_falls_back_to_argmax() {
    let rep = rep_none(12, 2);
    assert_eq!(rep.dims(0), &[0]);
    assert_eq!(rep.dims(1), &[1]);
}

#[test]
fn clone_ori_is_bit_exact_copy() {
    let (ds, split) = sbm_two_class();
    let rep = rep_none(12, 3);
    let (aug, aug_split) = clone_nodes(
        &ds,
        &split,
        1,
        1,
        AugmentMode::Ori,
        &rep,
        0.5,
        CloneWiring::Inherit,
        7,
    )
    .unwrap();
    let n = ds.graph.n_nodes();
    // first round-robin source: lowest train node of class 1
    let src = *split
        .train
        .iter()
        .find(|&&v| ds.labels.label(v) == Some(1))
        .unwrap();
    for (a, b) in aug.features.row(n).iter().zip(ds.features.row(src)) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(aug.labels.label(n), Some(1));
    assert!(aug_split.train.contains(&n));
    assert!(!aug_split.val.contains(&n) && !aug_split.test.contains(&n));
    // clone inherits the source's neighborhood plus the source link
    let mut expect: Vec<u32> = ds.graph.in_neighbors(src).to_vec();
    expect.push(src as u32);
    expect.sort_unstable();
    assert_eq!(aug.graph.in_neighbors(n), &expect[..]);
}

#[test]
fn clone_aa_with_full_representative_set_equals_ori() {
    let (ds, split) = sbm_two_class();
    let rep = RepresentativeSet::all(3, 12);
    let (a, _) = clone_nodes(&ds, &split, 1, 3, AugmentMode::AllClean, &rep, 0.5, CloneWiring::Inherit, 7).unwrap();
    let (b, _) = clone_nodes(&ds, &split, 1, 3, AugmentMode::Ori, &rep, 0.5, CloneWiring::Inherit, 7).unwrap();
    let n = ds.graph.n_nodes();
    for v in n..n + 3 {
        assert_eq!(a.features.row(v), b.features.row(v));
    }
}

#[test]
fn clone_aa_zeroes_all_nonrepresentative_dims() {
    let (ds, split) = sbm_two_class();
    let rep = rep_none(12, 3); // only dim 1 representative for class 1
    let (aug, _) = clone_nodes(&ds, &split, 1, 5, AugmentMode::AllClean, &rep, 0.5, CloneWiring::Inherit, 7).unwrap();
    let n = ds.graph.n_nodes();
    for v in n..n + 5 {
        for (j, &x) in aug.features.row(v).iter().enumerate() {
            if j != 1 {
                assert_eq!(x, 0.0);
            }
        }
    }
}

#[test]
fn clone_ap_zeroing_rate_within_binomial_band() {
    let (ds, split) = sbm_two_class();
    // make dims 0..2 representative for class 1 → 10 clearable dims, but
    // only dims that were nonzero at the source count as observable zeroings.
    let fa = FeatureAttention::from_rows(
        vec![vec![1.0; 12], {
            let mut r = vec![0.0; 12];
            r[0] = 0.4;
            r[1] = 0.4;
            r[2] = 0.2;
            r
        }, vec![1.0; 12]],
        12,
    );
    let rep = extract_representative(&fa, 0.1);
    assert_eq!(rep.dims(1), &[0, 1, 2]);

    let count = 200;
    let p_a = 0.5;
    let (aug, _) = clone_nodes(&ds, &split, 1, count, AugmentMode::PartClean, &rep, p_a, CloneWiring::Inherit, 13).unwrap();
    let n = ds.graph.n_nodes();
    let sources: Vec<usize> = split
        .train
        .iter()
        .copied()
        .filter(|&v| ds.labels.label(v) == Some(1))
        .collect();
    let mut trials = 0usize; // nonzero non-rep source entries
    let mut zeroed = 0usize;
    for i in 0..count {
        let src = sources[i % sources.len()];
        for j in 3..12 {
            let sv = ds.features.row(src)[j];
            if sv != 0.0 {
                trials += 1;
                if aug.features.row(n + i)[j] == 0.0 {
                    zeroed += 1;
                }
            }
        }
    }
    let mean = trials as f64 * p_a;
    let sigma = (trials as f64 * p_a * (1.0 - p_a)).sqrt();
    assert!(
        (zeroed as f64 - mean).abs() <= 3.0 * sigma,
        "zeroed {zeroed} of {trials}, expected ~{mean} (sigma {sigma})"
    );
}

#[test]
fn clone_an_keeps_representative_dims_and_draws_noise_from_observed_values() {
    let (ds, split) = sbm_two_class();
    let fa = FeatureAttention::from_rows(
        vec![vec![1.0; 12], {
            let mut r = vec![0.0; 12];
            r[3] = 0.5;
            r[4] = 0.5;
            r
        }, vec![1.0; 12]],
        12,
    );
    let rep = extract_representative(&fa, 0.2);
    let (aug, _) = clone_nodes(&ds, &split, 1, 50, AugmentMode::Noise, &rep, 0.7, CloneWiring::Inherit, 23).unwrap();
    let n = ds.graph.n_nodes();
    let sources: Vec<usize> = split
        .train
        .iter()
        .copied()
        .filter(|&v| ds.labels.label(v) == Some(1))
        .collect();
    for i in 0..50 {
        let src = sources[i % sources.len()];
        let clone_row = aug.features.row(n + i);
        // representative dims bit-equal to the source's
        for &j in rep.dims(1) {
            assert_eq!(clone_row[j].to_bits(), ds.features.row(src)[j].to_bits());
        }
        // every other dim holds a value observed in the category
        for j in 0..12 {
            if rep.dims(1).contains(&j) {
                continue;
            }
            let observed: Vec<f64> =
                sources.iter().map(|&v| ds.features.row(v)[j]).collect();
            assert!(
                observed.iter().any(|&o| o.to_bits() == clone_row[j].to_bits()),
                "dim {j} value {} not in the category's observed multiset",
                clone_row[j]
            );
        }
    }
}

#[test]
fn clone_invalid_p_a_rejected() {
    let (ds, split) = sbm_two_class();
    let rep = rep_none(12, 3);
    for bad in [0.0, 1.0, -0.5] {
        assert!(matches!(
            clone_nodes(&ds, &split, 1, 1, AugmentMode::PartClean, &rep, bad, CloneWiring::Inherit, 1),
            Err(AugmentError::Contract(_))
        ));
    }
    // ORI ignores p_a entirely
    assert!(clone_nodes(&ds, &split, 1, 1, AugmentMode::Ori, &rep, 0.0, CloneWiring::Inherit, 1).is_ok());
}

#[test]
fn cloning_never_mutates_original_nodes() {
    let (ds, split) = sbm_two_class();
    let rep = rep_none(12, 3);
    let (aug, _) = clone_nodes(&ds, &split, 0, 10, AugmentMode::PartClean, &rep, 0.5, CloneWiring::Inherit, 3).unwrap();
    let n = ds.graph.n_nodes();
    for v in 0..n {
        assert_eq!(aug.features.row(v), ds.features.row(v));
        assert_eq!(aug.labels.label(v), ds.labels.label(v));
        assert_eq!(aug.original_ids[v], ds.original_ids[v]);
    }
    // original edges survive unchanged
    let old: std::collections::HashSet<(u32, u32)> = ds.graph.edges().iter().copied().collect();
    let new: std::collections::HashSet<(u32, u32)> = aug.graph.edges().iter().copied().collect();
    assert!(old.is_subset(&new));
    // and all added edges touch a clone
    for e in new.difference(&old) {
        assert!(e.0 as usize >= n || e.1 as usize >= n);
    }
}

#[test]
fn source_only_wiring_adds_exactly_one_link() {
    let (ds, split) = sbm_two_class();
    let rep = rep_none(12, 3);
    let (aug, _) = clone_nodes(&ds, &split, 1, 1, AugmentMode::Ori, &rep, 0.5, CloneWiring::SourceOnly, 3).unwrap();
    let n = ds.graph.n_nodes();
    assert_eq!(aug.graph.in_neighbors(n).len(), 1);
    assert_eq!(aug.graph.n_edges(), ds.graph.n_edges() + 2);
}

#[test]
fn two_class_balanced_at_ratio_ten() {
    let (ds, split) = sbm_two_class();
    let (two, tsplit) = build_two_class_dataset(&ds, &split, 0, 2, 10, 9).unwrap();
    assert_eq!(two.labels.n_classes(), 2);
    let maj = tsplit.train.iter().filter(|&&v| two.labels.label(v) == Some(0)).count();
    let min = tsplit.train.iter().filter(|&&v| two.labels.label(v) == Some(1)).count();
    assert_eq!(maj, 20);
    assert_eq!(min, 20);
}

#[test]
fn two_class_ratio_one_takes_a_tenth() {
    let (ds, split) = sbm_two_class();
    let (two, tsplit) = build_two_class_dataset(&ds, &split, 0, 2, 1, 9).unwrap();
    let min = tsplit.train.iter().filter(|&&v| two.labels.label(v) == Some(1)).count();
    assert_eq!(min, 2); // ceil(20 / 10)
}

#[test]
fn two_class_keeps_only_the_two_classes_and_their_edges() {
    let (ds, split) = sbm_two_class();
    let (two, tsplit) = build_two_class_dataset(&ds, &split, 0, 2, 5, 9).unwrap();
    assert_eq!(two.graph.n_nodes(), 60);
    // exhaustive scan: every edge's endpoints belong to kept nodes and
    // map back to class-0/2 originals
    for &(s, d) in two.graph.edges() {
        for v in [s as usize, d as usize] {
            let orig = two.original_ids[v] as usize;
            let l = ds.labels.label(orig).unwrap();
            assert!(l == 0 || l == 2);
        }
    }
    // edge count matches an independent filter over the original graph
    let kept: std::collections::HashSet<u64> = two.original_ids.iter().copied().collect();
    let expect = ds
        .graph
        .edges()
        .iter()
        .filter(|&&(s, d)| {
            kept.contains(&ds.original_ids[s as usize]) && kept.contains(&ds.original_ids[d as usize])
        })
        .count();
    assert_eq!(two.graph.n_edges(), expect);
    // test set is minority-only
    assert!(!tsplit.test.is_empty());
    for &v in &tsplit.test {
        assert_eq!(two.labels.label(v), Some(1));
    }
}

#[test]
fn two_class_same_classes_rejected() {
    let (ds, split) = sbm_two_class();
    assert!(matches!(
        build_two_class_dataset(&ds, &split, 1, 1, 5, 9),
        Err(AugmentError::Contract(_))
    ));
}

#[test]
fn rebalance_balanced_dataset_adds_nothing() {
    let (ds, split) = sbm_two_class();
    let rep = rep_none(12, 3);
    let (aug, asplit) =
        rebalance_all(&ds, &split, 1.5, AugmentMode::PartClean, &rep, 0.5, CloneWiring::Inherit, 3).unwrap();
    assert_eq!(aug.graph.n_nodes(), ds.graph.n_nodes());
    assert_eq!(asplit.train.len(), split.train.len());
}

#[test]
fn rebalance_grows_minority_to_ratio() {
    // train counts {100, 20} → target ceil(100/1.5) = 67
    let spec = SbmSpec {
        n_per_class: 120,
        n_classes: 2,
        p_in: 0.05,
        p_out: 0.01,
        signal_dims_per_class: 2,
        q_hi: 0.8,
        q_lo: 0.1,
        n_features: 8,
        seed: 3,
    };
    let ds = generate_sbm(&spec).unwrap();
    let mut train: Vec<usize> = (0..100).collect(); // class 0
    train.extend(120..140); // 20 of class 1
    let split = Split { train, val: vec![110, 111], test: vec![150, 151] };
    let rep = rep_none(8, 2);
    let (aug, asplit) =
        rebalance_all(&ds, &split, 1.5, AugmentMode::PartClean, &rep, 0.5, CloneWiring::Inherit, 3).unwrap();
    let c1 = asplit.train.iter().filter(|&&v| aug.labels.label(v) == Some(1)).count();
    assert_eq!(c1, 67);
    let c0 = asplit.train.iter().filter(|&&v| aug.labels.label(v) == Some(0)).count();
    assert_eq!(c0, 100);
}

#[test]
fn rebalance_rejects_ratio_below_one() {
    let (ds, split) = sbm_two_class();
    let rep = rep_none(12, 3);
    assert!(matches!(
        rebalance_all(&ds, &split, 0.9, AugmentMode::PartClean, &rep, 0.5, CloneWiring::Inherit, 3),
        Err(AugmentError::Contract(_))
    ));
}

#[test]
fn sweep_ori_cells_are_invariant_to_p_a() {
    let (ds, split) = sbm_two_class();
    let small_model = ModelConfig {
        layers: 2,
        hidden: 4,
        heads: 2,
        pool_size: 2,
        dropout: 0.3,
        epochs: 15,
        patience: 15,
        ..ModelConfig::default()
    };
    let mut cfg = SweepConfig {
        ratios: vec![5],
        modes: vec![SweepMode::Augment(AugmentMode::Ori)],
        seeds: vec![0],
        p_a: 0.3,
        model: small_model,
        optim: AdamConfig::default(),
        jobs: 2,
        ..SweepConfig::default()
    };
    let a = ratio_sweep(&ds, &split, 0, 2, &cfg).unwrap();
    cfg.p_a = 0.9;
    let b = ratio_sweep(&ds, &split, 0, 2, &cfg).unwrap();
    assert_eq!(a.cells, b.cells);
    assert_eq!(a.cells.len(), 1);
    assert_eq!(a.cells[0].mode, "ori");
}

#[test]
fn sweep_report_tsv_shape() {
    let report = SweepReport {
        cells: vec![SweepCell { mode: "ap".into(), ratio: 5, seed: 1, minority_accuracy: 0.75 }],
        summary: vec![],
    };
    let tsv = report.to_tsv();
    let mut lines = tsv.lines();
    assert_eq!(lines.next().unwrap(), "mode\tratio\tseed\tminority_accuracy");
    assert_eq!(lines.next().unwrap(), "ap\t5\t1\t0.75");
}
