//! Tensor-module test suite: hand-computed primitive examples, the
//! per-primitive VJP-vs-finite-difference sweep, and tape contracts.

use super::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    // Magnitudes in ±[0.1, 1.1] keep samples away from activation kinks.
    let data = (0..rows * cols)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * (0.1 + rng.gen::<f64>())
        })
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Reduce any node to a scalar through a fixed random-ish projection so
/// every output coordinate influences the loss.
fn to_scalar(tape: &mut Tape, id: NodeId) -> Result<NodeId> {
    let (m, n) = tape.dims(id);
    let w = Tensor::from_vec(
        n,
        1,
        (0..n).map(|j| 0.3 + 0.7 * ((j * 37 % 11) as f64) / 11.0).collect(),
    )
    .unwrap();
    let wn = tape.constant(&w);
    let col = tape.matmul(id, wn)?;
    let u = Tensor::from_vec(
        1,
        m,
        (0..m).map(|i| 0.2 + 0.5 * ((i * 13 % 7) as f64) / 7.0).collect(),
    )
    .unwrap();
    let un = tape.constant(&u);
    tape.matmul(un, col)
}

fn check_primitive<F>(name: &str, trials: usize, tol: f64, build: F)
where
    F: Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>),
{
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    for trial in 0..trials {
        let (params, f) = build(&mut rng);
        let err = grad_check(&params, 1e-5, |tape, ids| {
            let out = f(tape, ids)?;
            to_scalar(tape, out)
        })
        .unwrap_or_else(|e| panic!("{name} trial {trial}: {e}"));
        assert!(err <= tol, "{name} trial {trial}: max rel err {err}");
    }
}

#[test]
fn vjp_matmul() {
    check_primitive("matmul", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 3, 4);
        let b = rand_tensor(rng, 4, 2);
        (vec![a, b], Box::new(|t, ids| t.matmul(ids[0], ids[1])))
    });
}

#[test]
fn vjp_add_and_mul() {
    check_primitive("add", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 3, 3);
        let b = rand_tensor(rng, 3, 3);
        (vec![a, b], Box::new(|t, ids| t.add(ids[0], ids[1])))
    });
    check_primitive("elementwise_mul", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 2, 5);
        let b = rand_tensor(rng, 2, 5);
        (vec![a, b], Box::new(|t, ids| t.elementwise_mul(ids[0], ids[1])))
    });
}

#[test]
fn vjp_scalar_scale_and_scale_by() {
    check_primitive("scalar_scale", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 4, 2);
        (vec![a], Box::new(|t, ids| t.scalar_scale(ids[0], -1.7)))
    });
    check_primitive("scale_by", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 4, 2);
        let s = rand_tensor(rng, 1, 1);
        (vec![a, s], Box::new(|t, ids| t.scale_by(ids[0], ids[1])))
    });
}

#[test]
fn vjp_mean_over_both_axes() {
    for axis in [0usize, 1] {
        check_primitive("mean_over", 20, 1e-6, move |rng| {
            let a = rand_tensor(rng, 3, 4);
            (vec![a], Box::new(move |t, ids| t.mean_over(ids[0], axis)))
        });
    }
}

#[test]
fn vjp_concat_and_slice() {
    for axis in [0usize, 1] {
        check_primitive("concat", 10, 1e-6, move |rng| {
            let a = rand_tensor(rng, 2, 3);
            let b = rand_tensor(rng, 2, 3);
            (
                vec![a, b],
                Box::new(move |t, ids| t.concat(&[ids[0], ids[1]], axis)),
            )
        });
    }
    check_primitive("slice_rows", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 5, 3);
        (vec![a], Box::new(|t, ids| t.slice(ids[0], 0, 1, 3)))
    });
    check_primitive("slice_cols", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 3, 5);
        (vec![a], Box::new(|t, ids| t.slice(ids[0], 1, 2, 2)))
    });
}

#[test]
fn vjp_activations() {
    check_primitive("leaky_relu", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 3, 4);
        (vec![a], Box::new(|t, ids| t.leaky_relu(ids[0], 0.2)))
    });
    check_primitive("elu", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 3, 4);
        (vec![a], Box::new(|t, ids| t.elu(ids[0])))
    });
}

#[test]
fn vjp_softmaxes() {
    check_primitive("row_softmax", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 3, 5);
        (vec![a], Box::new(|t, ids| t.row_softmax(ids[0])))
    });
    check_primitive("masked_row_softmax", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 3, 5);
        let mut mask = Tensor::filled(3, 5, 1.0);
        // knock out two fixed positions per row, keep >=1 alive
        for r in 0..3 {
            mask.set(r, (r + 1) % 5, 0.0);
            mask.set(r, (r + 3) % 5, 0.0);
        }
        (
            vec![a],
            Box::new(move |t, ids| t.masked_row_softmax(ids[0], &mask)),
        )
    });
    check_primitive("segment_softmax", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 7, 1);
        (
            vec![a],
            Box::new(|t, ids| t.segment_softmax(ids[0], &[0, 3, 4, 7])),
        )
    });
}

#[test]
fn vjp_gather_scale_segment() {
    check_primitive("gather_rows", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 4, 3);
        (
            vec![a],
            Box::new(|t, ids| t.gather_rows(ids[0], &[2, 0, 2, 3, 1])),
        )
    });
    check_primitive("scale_rows", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 4, 3);
        let s = rand_tensor(rng, 4, 1);
        (vec![a, s], Box::new(|t, ids| t.scale_rows(ids[0], ids[1])))
    });
    check_primitive("segment_sum_rows", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 6, 2);
        (
            vec![a],
            Box::new(|t, ids| t.segment_sum_rows(ids[0], &[0, 2, 2, 5, 6])),
        )
    });
    check_primitive("masked_col_mean", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 4, 3);
        let mask: Vec<u8> = vec![1, 0, 1, 0, 1, 0, 1, 1, 0, 0, 0, 0];
        (
            vec![a],
            Box::new(move |t, ids| t.masked_col_mean(ids[0], &mask)),
        )
    });
}

#[test]
fn vjp_dropout_with_fixed_mask() {
    // Dropout is stochastic in the seed but deterministic given it, so
    // the finite-difference check holds with the seed pinned.
    check_primitive("dropout", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 4, 4);
        (
            vec![a],
            Box::new(|t, ids| t.dropout(ids[0], 0.4, true, 99)),
        )
    });
}

#[test]
fn vjp_cross_entropy() {
    check_primitive("cross_entropy", 20, 1e-6, |rng| {
        let a = rand_tensor(rng, 5, 3);
        let targets: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
        (
            vec![a],
            Box::new(move |t, ids| t.cross_entropy(ids[0], &targets, &[0, 2, 3])),
        )
    });
}

// ---- hand-computed examples ------------------------------------------

#[test]
fn row_softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::from_vec(1, 3, vec![0.0; 3]).unwrap());
    let y = tape.row_softmax(x).unwrap();
    for v in tape.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn leaky_relu_negative_input() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::scalar(-2.0));
    let y = tape.leaky_relu(x, 0.2).unwrap();
    assert!((tape.value(y)[0] - (-0.4)).abs() < 1e-15);
}

#[test]
fn masked_row_softmax_hand_example() {
    // softmax over [5, 9, 1] with mask [1, 0, 1]:
    // positions 0 and 2 share e^5/(e^5+e^1), e^1/(e^5+e^1); 1 is zero.
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::from_vec(1, 3, vec![5.0, 9.0, 1.0]).unwrap());
    let mask = Tensor::from_vec(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
    let y = tape.masked_row_softmax(x, &mask).unwrap();
    let v = tape.value(y);
    let denom = 5.0f64.exp() + 1.0f64.exp();
    assert!((v[0] - 5.0f64.exp() / denom).abs() < 1e-12);
    assert_eq!(v[1], 0.0);
    assert!((v[2] - 1.0f64.exp() / denom).abs() < 1e-12);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
}

#[test]
fn masked_row_softmax_all_masked_row_is_degenerate() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
    let mask = Tensor::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
    assert!(matches!(
        tape.masked_row_softmax(x, &mask),
        Err(TensorError::DegenerateRow { .. })
    ));
}

#[test]
fn row_softmax_rows_sum_to_one_and_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let t = rand_tensor(&mut rng, 4, 6);
        let mut tape = Tape::new();
        let x = tape.constant(&t);
        let y = tape.row_softmax(x).unwrap();
        let v = tape.value(y);
        for r in 0..4 {
            let sum: f64 = v[r * 6..(r + 1) * 6].iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            assert!(v[r * 6..(r + 1) * 6].iter().all(|&p| p > 0.0));
        }
    }
}

#[test]
fn dropout_eval_is_bit_exact_identity() {
    let mut tape = Tape::new();
    let t = Tensor::from_vec(2, 2, vec![1.5, -2.25, 0.0, 1e-300]).unwrap();
    let x = tape.constant(&t);
    let y = tape.dropout(x, 0.5, false, 1).unwrap();
    assert_eq!(x, y, "eval-mode dropout must return the same node");
    let z = tape.dropout(x, 0.0, true, 1).unwrap();
    assert_eq!(x, z, "p=0 dropout must return the same node");
}

#[test]
fn dropout_mean_preserved_within_3_sigma() {
    // 1e4 samples of a single kept/dropped value: mean of masked outputs
    // is within 3 sigma of the input value.
    let p = 0.4;
    let x = 2.0;
    let n = 10_000;
    let mut sum = 0.0;
    for seed in 0..n {
        let mut tape = Tape::new();
        let xt = tape.constant(&Tensor::scalar(x));
        let y = tape.dropout(xt, p, true, seed).unwrap();
        sum += tape.value(y)[0];
    }
    let mean = sum / n as f64;
    // each sample is x/(1-p) w.p. (1-p), else 0; variance = x^2 p/(1-p)
    let sigma = (x * x * p / (1.0 - p) / n as f64).sqrt();
    assert!(
        (mean - x).abs() <= 3.0 * sigma,
        "dropout mean {mean} vs {x} (sigma {sigma})"
    );
}

#[test]
fn dropout_invalid_rate_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::scalar(1.0));
    assert!(tape.dropout(x, 1.0, true, 0).is_err());
    assert!(tape.dropout(x, -0.1, true, 0).is_err());
}

#[test]
fn backward_quadratic_hand_example() {
    // loss = sum(w ⊙ w) with w = [1, 2] → grad [2, 4]
    let w = Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap().requires_grad(true);
    let mut tape = Tape::new();
    let wn = tape.leaf(&w);
    let sq = tape.elementwise_mul(wn, wn).unwrap();
    let mean = tape.mean_over(sq, 1).unwrap(); // (1,1): (w0^2+w1^2)/2
    let loss = tape.scalar_scale(mean, 2.0).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(wn).unwrap();
    assert!((g[0] - 2.0).abs() < 1e-12);
    assert!((g[1] - 4.0).abs() < 1e-12);
}

#[test]
fn unused_parameter_gets_zero_grad() {
    let w = Tensor::from_vec(1, 2, vec![3.0, -1.0]).unwrap().requires_grad(true);
    let c = Tensor::scalar(5.0).requires_grad(true);
    let mut tape = Tape::new();
    let _wn = tape.leaf(&w);
    let cn = tape.leaf(&c);
    let loss = tape.elementwise_mul(cn, cn).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(_wn).unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_twice_is_an_error() {
    let w = Tensor::scalar(2.0).requires_grad(true);
    let mut tape = Tape::new();
    let wn = tape.leaf(&w);
    let loss = tape.elementwise_mul(wn, wn).unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(TensorError::TapeConsumed)));
}

#[test]
fn non_scalar_loss_rejected() {
    let w = Tensor::from_vec(2, 1, vec![1.0, 2.0]).unwrap().requires_grad(true);
    let mut tape = Tape::new();
    let wn = tape.leaf(&w);
    assert!(matches!(
        tape.backward(wn),
        Err(TensorError::NonScalarLoss { .. })
    ));
}

#[test]
fn softmax_cross_entropy_composite_matches_finite_differences() {
    let logits = Tensor::from_vec(4, 3, vec![0.5, -0.2, 0.9, 1.4, 0.3, -0.7, 0.0, 0.25, -1.2, 2.0, 0.1, 0.6])
        .unwrap();
    let targets = vec![2usize, 0, 1, 0];
    let err = grad_check(&[logits], 1e-5, |tape, ids| {
        tape.cross_entropy(ids[0], &targets, &[0, 1, 2, 3])
    })
    .unwrap();
    assert!(err <= 1e-6, "composite rel err {err}");
}

#[test]
fn cross_entropy_hand_examples() {
    // uniform logits, C=4 → ln 4
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::from_vec(1, 4, vec![0.0; 4]).unwrap());
    let loss = tape.cross_entropy(x, &[1], &[0]).unwrap();
    assert!((tape.value(loss)[0] - 4.0f64.ln()).abs() < 1e-12);

    // single node, logits [1,2], label 1 → −ln(e²/(e¹+e²))
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
    let loss = tape.cross_entropy(x, &[1], &[0]).unwrap();
    let expected = -(2.0f64.exp() / (1.0f64.exp() + 2.0f64.exp())).ln();
    assert!((tape.value(loss)[0] - expected).abs() < 1e-12);

    // perfect one-hot logits with a large margin → loss near 0
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::from_vec(1, 3, vec![50.0, 0.0, 0.0]).unwrap());
    let loss = tape.cross_entropy(x, &[0], &[0]).unwrap();
    assert!(tape.value(loss)[0] < 1e-12);

    // empty mask is a contract error
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::from_vec(1, 2, vec![0.0, 0.0]).unwrap());
    assert!(matches!(
        tape.cross_entropy(x, &[0], &[]),
        Err(TensorError::Contract(_))
    ));
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(2, 3));
    let b = tape.constant(&Tensor::zeros(2, 3));
    assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape { .. })));
    let c = tape.constant(&Tensor::zeros(3, 2));
    assert!(matches!(tape.add(a, c), Err(TensorError::Shape { .. })));
    assert!(matches!(
        tape.slice(a, 0, 1, 5),
        Err(TensorError::Shape { .. })
    ));
}

#[test]
fn segment_softmax_rejects_empty_segment() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
    assert!(matches!(
        tape.segment_softmax(a, &[0, 2, 2, 3]),
        Err(TensorError::DegenerateRow { .. })
    ));
}

#[test]
fn masked_col_mean_counts_touches() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let mask = vec![1u8, 0, 1, 1, 0, 0];
    let mu = tape.masked_col_mean(a, &mask).unwrap();
    assert_eq!(tape.masked_touch_count(), 3);
    let v = tape.value(mu);
    assert!((v[0] - 2.5).abs() < 1e-15); // (1+4)/2
    assert_eq!(v[1], 0.0); // no masked entries → 0
    assert!((v[2] - 3.0).abs() < 1e-15); // 3/1
}

#[test]
fn non_finite_output_is_caught() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::from_vec(1, 1, vec![1e308]).unwrap());
    let b = tape.constant(&Tensor::from_vec(1, 1, vec![1e308]).unwrap());
    assert!(matches!(tape.add(a, b), Err(TensorError::NonFinite { .. })));
}
