//! Dense rank-2 tensors with reverse-mode differentiation.
//!
//! The computation tape ([`Tape`]) records primitives as they execute and
//! replays them in reverse to populate gradients. Tensors are plain
//! row-major `f64` buffers; everything here is 64-bit so gradient-check
//! tolerances stay meaningful.

mod checkpoint;
mod gradcheck;
mod optim;
mod tape;
#[cfg(test)]
mod tests;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointIndex, TensorRecord};
pub use gradcheck::{analytic_gradients, grad_check, max_rel_error, numeric_gradients};
pub use optim::{AdamConfig, AdamState};
pub use tape::{NodeId, Tape};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: row {row} has no unmasked entries")]
    DegenerateRow { op: &'static str, row: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("contract violation: {0}")]
    Contract(String),
}

/// A dense row-major matrix. Vectors are explicit `(1, n)` or `(n, 1)`
/// tensors; scalars are `(1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape {
                op: "from_vec",
                detail: format!("{} values for a {rows}x{cols} tensor", data.len()),
            });
        }
        Ok(Tensor {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(1, 1, vec![value]).unwrap()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn needs_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<f64>) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "set_grad",
                detail: format!("grad has {} values, tensor has {}", g.len(), self.data.len()),
            });
        }
        self.grad = Some(g);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Xavier (Glorot) uniform initialization: entries drawn from
/// `±sqrt(6 / (fan_in + fan_out))` with fan-in/fan-out taken from the shape.
pub fn xavier_init(rows: usize, cols: usize, seed: u64) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(TensorError::Contract(format!(
            "xavier_init requires nonzero dims, got {rows}x{cols}"
        )));
    }
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Ok(Tensor {
        rows,
        cols,
        data,
        requires_grad: true,
        grad: None,
    })
}

/// Splits one master seed into a stream of per-use sub-seeds.
pub fn split_seed(master: u64, index: u64) -> u64 {
    // SplitMix64 finalizer over master ^ golden-ratio-stepped index.
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sums values after sorting them, so the result depends only on the
/// multiset of summands and not on their arrival order. Node-axis
/// reductions use this to stay bit-exact under node relabeling.
pub fn canonical_sum(buf: &mut Vec<f64>) -> f64 {
    buf.sort_unstable_by(|a, b| a.total_cmp(b));
    buf.iter().sum()
}

#[cfg(test)]
mod mod_tests {
    use super::*;

    #[test]
    fn xavier_variance_matches_uniform_law() {
        // Uniform on ±L has variance L^2/3 = 2/(fan_in+fan_out).
        let t = xavier_init(100, 100, 42).unwrap();
        let mean: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let var: f64 =
            t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.len() as f64;
        let expected = 2.0 / 200.0;
        assert!(
            (var - expected).abs() < 0.1 * expected,
            "sample variance {var} vs expected {expected}"
        );
    }

    #[test]
    fn xavier_zero_dim_rejected() {
        assert!(matches!(
            xavier_init(0, 5, 1),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn xavier_bounds_hold() {
        let t = xavier_init(10, 30, 7).unwrap();
        let limit = (6.0 / 40.0_f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < limit));
    }

    #[test]
    fn canonical_sum_is_order_free() {
        let mut a = vec![1e16, 1.0, -1e16, 3.5, 0.25];
        let mut b = vec![3.5, -1e16, 0.25, 1e16, 1.0];
        assert_eq!(canonical_sum(&mut a).to_bits(), canonical_sum(&mut b).to_bits());
    }

    #[test]
    fn from_vec_rejects_bad_len() {
        assert!(Tensor::from_vec(2, 2, vec![1.0; 3]).is_err());
    }
}
