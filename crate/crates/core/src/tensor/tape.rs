//! The computation tape: forward primitives plus reverse-mode backward.
//!
//! Every primitive appends one entry holding the forward value and whatever
//! the backward rule needs. Entries are created in topological order, so
//! `backward` is a single reverse sweep. A tape can be consumed by backward
//! exactly once; a second call is an error rather than a silent gradient
//! double-count.

use super::{canonical_sum, Result, Tensor, TensorError};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Handle to a tape entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Entry {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    ScalarScale { a: NodeId, k: f64 },
    MeanOver { a: NodeId, axis: usize },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize },
    LeakyRelu { a: NodeId, slope: f64 },
    Elu { a: NodeId },
    RowSoftmax { a: NodeId },
    MaskedRowSoftmax { a: NodeId, mask: Vec<f64> },
    Dropout { a: NodeId, keep: Vec<f64> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<usize>, probs: Vec<f64> },
    GatherRows { a: NodeId, idx: Vec<usize> },
    ScaleRows { a: NodeId, s: NodeId },
    SegmentSoftmax { a: NodeId, offsets: Vec<usize> },
    SegmentSumRows { a: NodeId, offsets: Vec<usize> },
    MaskedColMean { a: NodeId, positions: Vec<(usize, usize)>, counts: Vec<usize> },
    ScaleBy { a: NodeId, s: NodeId },
}

pub struct Tape {
    entries: Vec<Entry>,
    consumed: bool,
    masked_touches: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { entries: Vec::new(), consumed: false, masked_touches: 0 }
    }

    /// Register a tensor as a leaf. Gradient is tracked when the tensor
    /// requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.rows(), t.cols(), t.data().to_vec(), t.needs_grad(), Op::Leaf)
    }

    /// Register a constant leaf (never differentiated).
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.rows(), t.cols(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let e = &self.entries[id.0];
        (e.rows, e.cols)
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let e = &self.entries[id.0];
        Tensor::from_vec(e.rows, e.cols, e.value.clone()).unwrap()
    }

    /// Gradient of the loss w.r.t. this node, populated by `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.entries[id.0].grad.as_deref()
    }

    /// Total entries touched by `masked_col_mean` so far; the feature
    /// attention scoring cost is exactly this count.
    pub fn masked_touch_count(&self) -> u64 {
        self.masked_touches
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.entries.push(Entry { rows, cols, value, grad: None, needs_grad, op });
        NodeId(self.entries.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.entries[id.0].needs_grad
    }

    fn check_finite(&self, op: &'static str, id: NodeId) -> Result<NodeId> {
        if self.entries[id.0].value.iter().all(|v| v.is_finite()) {
            Ok(id)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    // ---- primitives -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(TensorError::Shape {
                op: "matmul",
                detail: format!("{m}x{ka} @ {kb}x{n}"),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let av = &self.entries[a.0].value;
            let bv = &self.entries[b.0].value;
            for i in 0..m {
                for k in 0..ka {
                    let aik = av[i * ka + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[k * n..(k + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        let id = self.push(m, n, out, ng, Op::Matmul { a, b });
        self.check_finite("matmul", id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if self.dims(b) != (m, n) {
            return Err(TensorError::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            });
        }
        let out: Vec<f64> = self.entries[a.0]
            .value
            .iter()
            .zip(&self.entries[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        let id = self.push(m, n, out, ng, Op::Add { a, b });
        self.check_finite("add", id)
    }

    pub fn elementwise_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if self.dims(b) != (m, n) {
            return Err(TensorError::Shape {
                op: "elementwise_mul",
                detail: format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            });
        }
        let out: Vec<f64> = self.entries[a.0]
            .value
            .iter()
            .zip(&self.entries[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        let id = self.push(m, n, out, ng, Op::Mul { a, b });
        self.check_finite("elementwise_mul", id)
    }

    pub fn scalar_scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.entries[a.0].value.iter().map(|x| x * k).collect();
        let ng = self.needs(a);
        let id = self.push(m, n, out, ng, Op::ScalarScale { a, k });
        self.check_finite("scalar_scale", id)
    }

    /// Mean along one axis: axis 0 collapses rows to a `(1, n)` tensor,
    /// axis 1 collapses columns to `(m, 1)`.
    pub fn mean_over(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if axis > 1 {
            return Err(TensorError::Shape {
                op: "mean_over",
                detail: format!("axis {axis} out of range for rank-2 tensor"),
            });
        }
        let av = &self.entries[a.0].value;
        let (rows, cols, out) = if axis == 0 {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += av[i * n + j];
                }
            }
            for v in &mut out {
                *v /= m as f64;
            }
            (1, n, out)
        } else {
            let mut out = vec![0.0; m];
            for i in 0..m {
                out[i] = av[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64;
            }
            (m, 1, out)
        };
        let ng = self.needs(a);
        let id = self.push(rows, cols, out, ng, Op::MeanOver { a, axis });
        self.check_finite("mean_over", id)
    }

    /// Concatenate along axis 0 (stack rows) or axis 1 (stack columns).
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(TensorError::Shape { op: "concat", detail: "no inputs".into() });
        }
        if axis > 1 {
            return Err(TensorError::Shape {
                op: "concat",
                detail: format!("axis {axis} out of range"),
            });
        }
        let (m0, n0) = self.dims(inputs[0]);
        let (mut rows, mut cols) = (m0, n0);
        for &id in &inputs[1..] {
            let (m, n) = self.dims(id);
            if axis == 0 {
                if n != n0 {
                    return Err(TensorError::Shape {
                        op: "concat",
                        detail: format!("column mismatch {n} vs {n0}"),
                    });
                }
                rows += m;
            } else {
                if m != m0 {
                    return Err(TensorError::Shape {
                        op: "concat",
                        detail: format!("row mismatch {m} vs {m0}"),
                    });
                }
                cols += n;
            }
        }
        let mut out = vec![0.0; rows * cols];
        if axis == 0 {
            let mut at = 0;
            for &id in inputs {
                let v = &self.entries[id.0].value;
                out[at..at + v.len()].copy_from_slice(v);
                at += v.len();
            }
        } else {
            let mut col_at = 0;
            for &id in inputs {
                let (m, n) = self.dims(id);
                let v = &self.entries[id.0].value;
                for i in 0..m {
                    out[i * cols + col_at..i * cols + col_at + n]
                        .copy_from_slice(&v[i * n..(i + 1) * n]);
                }
                col_at += n;
            }
        }
        let ng = inputs.iter().any(|&i| self.needs(i));
        let id = self.push(rows, cols, out, ng, Op::Concat { inputs: inputs.to_vec(), axis });
        self.check_finite("concat", id)
    }

    /// Contiguous slice along one axis.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        let bound = if axis == 0 { m } else { n };
        if axis > 1 || start + len > bound || len == 0 {
            return Err(TensorError::Shape {
                op: "slice",
                detail: format!("axis {axis} range {start}..{} of {bound}", start + len),
            });
        }
        let av = &self.entries[a.0].value;
        let (rows, cols, out) = if axis == 0 {
            (len, n, av[start * n..(start + len) * n].to_vec())
        } else {
            let mut out = vec![0.0; m * len];
            for i in 0..m {
                out[i * len..(i + 1) * len].copy_from_slice(&av[i * n + start..i * n + start + len]);
            }
            (m, len, out)
        };
        let ng = self.needs(a);
        let id = self.push(rows, cols, out, ng, Op::Slice { a, axis, start });
        self.check_finite("slice", id)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.entries[a.0]
            .value
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let ng = self.needs(a);
        let id = self.push(m, n, out, ng, Op::LeakyRelu { a, slope });
        self.check_finite("leaky_relu", id)
    }

    pub fn elu(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.entries[a.0]
            .value
            .iter()
            .map(|&x| if x >= 0.0 { x } else { x.exp() - 1.0 })
            .collect();
        let ng = self.needs(a);
        let id = self.push(m, n, out, ng, Op::Elu { a });
        self.check_finite("elu", id)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if n == 0 {
            return Err(TensorError::Shape { op: "row_softmax", detail: "zero columns".into() });
        }
        let av = &self.entries[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let mut scratch = exps.clone();
            let sum = canonical_sum(&mut scratch);
            for v in &mut exps {
                *v /= sum;
            }
            out[i * n..(i + 1) * n].copy_from_slice(&exps);
        }
        let ng = self.needs(a);
        let id = self.push(m, n, out, ng, Op::RowSoftmax { a });
        self.check_finite("row_softmax", id)
    }

    /// Row softmax restricted to entries where `mask` is 1. Masked-out
    /// positions get exactly 0; the rest of each row sums to 1.
    pub fn masked_row_softmax(&mut self, a: NodeId, mask: &Tensor) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if mask.shape() != (m, n) {
            return Err(TensorError::Shape {
                op: "masked_row_softmax",
                detail: format!("mask {:?} vs input {m}x{n}", mask.shape()),
            });
        }
        let av = &self.entries[a.0].value;
        let mv = mask.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mrow = &mv[i * n..(i + 1) * n];
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m != 0.0)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateRow { op: "masked_row_softmax", row: i });
            }
            let mut sum_parts: Vec<f64> = Vec::new();
            for j in 0..n {
                if mrow[j] != 0.0 {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum_parts.push(e);
                }
            }
            let sum = canonical_sum(&mut sum_parts);
            for j in 0..n {
                if mrow[j] != 0.0 {
                    out[i * n + j] /= sum;
                }
            }
        }
        let ng = self.needs(a);
        let id = self.push(m, n, out, ng, Op::MaskedRowSoftmax { a, mask: mv.to_vec() });
        self.check_finite("masked_row_softmax", id)
    }

    /// Inverted dropout. With `training` false (or p == 0) this is the
    /// identity: the input node is returned unchanged, bit for bit.
    pub fn dropout(&mut self, a: NodeId, p: f64, training: bool, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let (m, n) = self.dims(a);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..m * n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = self.entries[a.0]
            .value
            .iter()
            .zip(&keep)
            .map(|(x, k)| x * k)
            .collect();
        let ng = self.needs(a);
        let id = self.push(m, n, out, ng, Op::Dropout { a, keep });
        self.check_finite("dropout", id)
    }

    /// Mean cross-entropy over the nodes listed in `mask`, computed from
    /// raw logits with a stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: &[usize]) -> Result<NodeId> {
        let (m, n) = self.dims(logits);
        if mask.is_empty() {
            return Err(TensorError::Contract("cross_entropy over an empty node mask".into()));
        }
        if targets.len() != m {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                detail: format!("{} targets for {m} rows", targets.len()),
            });
        }
        let av = &self.entries[logits.0].value;
        let mut probs = vec![0.0; m * n];
        let mut losses: Vec<f64> = Vec::with_capacity(mask.len());
        for &i in mask {
            if i >= m || targets[i] >= n {
                return Err(TensorError::Contract(format!(
                    "cross_entropy index out of range at node {i}"
                )));
            }
            let row = &av[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let mut scratch = exps.clone();
            let sum = canonical_sum(&mut scratch);
            for v in &mut exps {
                *v /= sum;
            }
            losses.push(-(exps[targets[i]].max(f64::MIN_POSITIVE)).ln());
            probs[i * n..(i + 1) * n].copy_from_slice(&exps);
        }
        let loss = canonical_sum(&mut losses) / mask.len() as f64;
        let ng = self.needs(logits);
        let id = self.push(
            1,
            1,
            vec![loss],
            ng,
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs },
        );
        self.check_finite("cross_entropy", id)
    }

    /// Select rows by index (rows may repeat). Backward scatter-adds.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(TensorError::Shape {
                op: "gather_rows",
                detail: format!("row {bad} out of {m}"),
            });
        }
        let av = &self.entries[a.0].value;
        let mut out = vec![0.0; idx.len() * n];
        for (r, &i) in idx.iter().enumerate() {
            out[r * n..(r + 1) * n].copy_from_slice(&av[i * n..(i + 1) * n]);
        }
        let ng = self.needs(a);
        let id = self.push(idx.len(), n, out, ng, Op::GatherRows { a, idx: idx.to_vec() });
        self.check_finite("gather_rows", id)
    }

    /// Scale row `i` of `a` by the scalar `s[i]`; `s` must be `(m, 1)`.
    pub fn scale_rows(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if self.dims(s) != (m, 1) {
            return Err(TensorError::Shape {
                op: "scale_rows",
                detail: format!("scales {:?} for {m}x{n} input", self.dims(s)),
            });
        }
        let av = &self.entries[a.0].value;
        let sv = &self.entries[s.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = av[i * n + j] * sv[i];
            }
        }
        let ng = self.needs(a) || self.needs(s);
        let id = self.push(m, n, out, ng, Op::ScaleRows { a, s });
        self.check_finite("scale_rows", id)
    }

    /// Softmax within each contiguous segment of a `(e, 1)` column vector.
    /// `offsets` has one more entry than there are segments and must cover
    /// the whole column. An empty segment is a degenerate row.
    pub fn segment_softmax(&mut self, a: NodeId, offsets: &[usize]) -> Result<NodeId> {
        let (e, c) = self.dims(a);
        if c != 1 {
            return Err(TensorError::Shape {
                op: "segment_softmax",
                detail: format!("expected column vector, got {e}x{c}"),
            });
        }
        check_offsets("segment_softmax", offsets, e)?;
        let av = &self.entries[a.0].value;
        let mut out = vec![0.0; e];
        for (seg, w) in offsets.windows(2).enumerate() {
            let (lo, hi) = (w[0], w[1]);
            if lo == hi {
                return Err(TensorError::DegenerateRow { op: "segment_softmax", row: seg });
            }
            let seg = &av[lo..hi];
            let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = seg.iter().map(|&x| (x - max).exp()).collect();
            let mut scratch = exps.clone();
            let sum = canonical_sum(&mut scratch);
            for (k, v) in exps.iter().enumerate() {
                out[lo + k] = v / sum;
            }
        }
        let ng = self.needs(a);
        let id = self.push(e, 1, out, ng, Op::SegmentSoftmax { a, offsets: offsets.to_vec() });
        self.check_finite("segment_softmax", id)
    }

    /// Sum rows within each contiguous segment: `(e, n)` collapses to
    /// `(segments, n)`. Empty segments produce zero rows.
    pub fn segment_sum_rows(&mut self, a: NodeId, offsets: &[usize]) -> Result<NodeId> {
        let (e, n) = self.dims(a);
        check_offsets("segment_sum_rows", offsets, e)?;
        let segs = offsets.len() - 1;
        let av = &self.entries[a.0].value;
        let mut out = vec![0.0; segs * n];
        let mut buf: Vec<f64> = Vec::new();
        for (s, w) in offsets.windows(2).enumerate() {
            for j in 0..n {
                buf.clear();
                for k in w[0]..w[1] {
                    buf.push(av[k * n + j]);
                }
                out[s * n + j] = canonical_sum(&mut buf);
            }
        }
        let ng = self.needs(a);
        let id = self.push(segs, n, out, ng, Op::SegmentSumRows { a, offsets: offsets.to_vec() });
        self.check_finite("segment_sum_rows", id)
    }

    /// Per-column mean over the entries where `mask` is nonzero, as a
    /// `(1, n)` tensor. Columns with no masked entries contribute 0.
    /// Only masked entries are touched; each touch increments the tape's
    /// instrumented counter.
    pub fn masked_col_mean(&mut self, a: NodeId, mask: &[u8]) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if mask.len() != m * n {
            return Err(TensorError::Shape {
                op: "masked_col_mean",
                detail: format!("mask has {} entries for {m}x{n} input", mask.len()),
            });
        }
        let mut positions: Vec<(usize, usize)> = Vec::new();
        let mut counts = vec![0usize; n];
        for i in 0..m {
            for j in 0..n {
                if mask[i * n + j] != 0 {
                    positions.push((i, j));
                    counts[j] += 1;
                }
            }
        }
        let av = &self.entries[a.0].value;
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); n];
        for &(i, j) in &positions {
            cols[j].push(av[i * n + j]);
        }
        self.masked_touches += positions.len() as u64;
        let out: Vec<f64> = cols
            .iter_mut()
            .enumerate()
            .map(|(j, c)| canonical_sum(c) / counts[j].max(1) as f64)
            .collect();
        let ng = self.needs(a);
        let id = self.push(1, n, out, ng, Op::MaskedColMean { a, positions, counts });
        self.check_finite("masked_col_mean", id)
    }

    /// Multiply every entry of `a` by the learnable scalar node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if self.dims(s) != (1, 1) {
            return Err(TensorError::Shape {
                op: "scale_by",
                detail: format!("scalar expected, got {:?}", self.dims(s)),
            });
        }
        let k = self.entries[s.0].value[0];
        let out: Vec<f64> = self.entries[a.0].value.iter().map(|x| x * k).collect();
        let ng = self.needs(a) || self.needs(s);
        let id = self.push(m, n, out, ng, Op::ScaleBy { a, s });
        self.check_finite("scale_by", id)
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call
    /// is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        self.consumed = true;
        {
            let e = &self.entries[loss.0];
            if (e.rows, e.cols) != (1, 1) {
                return Err(TensorError::NonScalarLoss { rows: e.rows, cols: e.cols });
            }
        }
        for e in &mut self.entries {
            if e.needs_grad {
                e.grad = Some(vec![0.0; e.value.len()]);
            }
        }
        if let Some(g) = self.entries[loss.0].grad.as_mut() {
            g[0] = 1.0;
        }
        for i in (0..=loss.0).rev() {
            if !self.entries[i].needs_grad || self.entries[i].grad.is_none() {
                continue;
            }
            self.backprop_entry(i);
        }
        Ok(())
    }

    fn backprop_entry(&mut self, i: usize) {
        // Grad and op are swapped out so input grads can be borrowed
        // mutably; both are restored at the end.
        let gout = self.entries[i].grad.take().unwrap();
        let (rows, cols) = (self.entries[i].rows, self.entries[i].cols);
        let op = std::mem::replace(&mut self.entries[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if self.needs(*a) {
                    let bv = self.entries[b.0].value.clone();
                    let ga = self.entries[a.0].grad.as_mut().unwrap();
                    for ii in 0..m {
                        for jj in 0..n {
                            let g = gout[ii * n + jj];
                            if g == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                ga[ii * k + kk] += g * bv[kk * n + jj];
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let av = self.entries[a.0].value.clone();
                    let gb = self.entries[b.0].grad.as_mut().unwrap();
                    for ii in 0..m {
                        for kk in 0..k {
                            let x = av[ii * k + kk];
                            if x == 0.0 {
                                continue;
                            }
                            for jj in 0..n {
                                gb[kk * n + jj] += x * gout[ii * n + jj];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if self.needs(*id) {
                        let g = self.entries[id.0].grad.as_mut().unwrap();
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.entries[b.0].value.clone();
                    let ga = self.entries[a.0].grad.as_mut().unwrap();
                    for ((gi, go), y) in ga.iter_mut().zip(&gout).zip(&bv) {
                        *gi += go * y;
                    }
                }
                if self.needs(*b) {
                    let av = self.entries[a.0].value.clone();
                    let gb = self.entries[b.0].grad.as_mut().unwrap();
                    for ((gi, go), x) in gb.iter_mut().zip(&gout).zip(&av) {
                        *gi += go * x;
                    }
                }
            }
            Op::ScalarScale { a, k } => {
                if self.needs(*a) {
                    let g = self.entries[a.0].grad.as_mut().unwrap();
                    for (gi, go) in g.iter_mut().zip(&gout) {
                        *gi += go * k;
                    }
                }
            }
            Op::MeanOver { a, axis } => {
                if self.needs(*a) {
                    let (m, n) = self.dims(*a);
                    let g = self.entries[a.0].grad.as_mut().unwrap();
                    if *axis == 0 {
                        for i in 0..m {
                            for j in 0..n {
                                g[i * n + j] += gout[j] / m as f64;
                            }
                        }
                    } else {
                        for i in 0..m {
                            for j in 0..n {
                                g[i * n + j] += gout[i] / n as f64;
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut at = 0;
                    for id in inputs {
                        let len = self.entries[id.0].value.len();
                        if self.needs(*id) {
                            let g = self.entries[id.0].grad.as_mut().unwrap();
                            for (gi, go) in g.iter_mut().zip(&gout[at..at + len]) {
                                *gi += go;
                            }
                        }
                        at += len;
                    }
                } else {
                    let mut col_at = 0;
                    for id in inputs {
                        let (m, n) = self.dims(*id);
                        if self.needs(*id) {
                            let g = self.entries[id.0].grad.as_mut().unwrap();
                            for i in 0..m {
                                for j in 0..n {
                                    g[i * n + j] += gout[i * cols + col_at + j];
                                }
                            }
                        }
                        col_at += n;
                    }
                }
            }
            Op::Slice { a, axis, start } => {
                if self.needs(*a) {
                    let (_, an) = self.dims(*a);
                    let g = self.entries[a.0].grad.as_mut().unwrap();
                    if *axis == 0 {
                        for (k, go) in gout.iter().enumerate() {
                            g[start * an + k] += go;
                        }
                    } else {
                        for i in 0..rows {
                            for j in 0..cols {
                                g[i * an + start + j] += gout[i * cols + j];
                            }
                        }
                    }
                }
            }
            Op::LeakyRelu { a, slope } => {
                if self.needs(*a) {
                    let av = self.entries[a.0].value.clone();
                    let g = self.entries[a.0].grad.as_mut().unwrap();
                    for ((gi, go), x) in g.iter_mut().zip(&gout).zip(&av) {
                        *gi += go * if *x >= 0.0 { 1.0 } else { *slope };
                    }
                }
            }
            Op::Elu { a } => {
                if self.needs(*a) {
                    let out = self.entries[i].value.clone();
                    let g = self.entries[a.0].grad.as_mut().unwrap();
                    for ((gi, go), y) in g.iter_mut().zip(&gout).zip(&out) {
                        *gi += go * if *y >= 0.0 { 1.0 } else { y + 1.0 };
                    }
                }
            }
            Op::RowSoftmax { a } => {
                if self.needs(*a) {
                    let out = self.entries[i].value.clone();
                    let n = cols;
                    let g = self.entries[a.0].grad.as_mut().unwrap();
                    for r in 0..rows {
                        let yrow = &out[r * n..(r + 1) * n];
                        let grow = &gout[r * n..(r + 1) * n];
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, go)| y * go).sum();
                        for j in 0..n {
                            g[r * n + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::MaskedRowSoftmax { a, mask } => {
                if self.needs(*a) {
                    let out = self.entries[i].value.clone();
                    let n = cols;
                    let g = self.entries[a.0].grad.as_mut().unwrap();
                    for r in 0..rows {
                        let yrow = &out[r * n..(r + 1) * n];
                        let grow = &gout[r * n..(r + 1) * n];
                        let mrow = &mask[r * n..(r + 1) * n];
                        let dot: f64 = yrow
                            .iter()
                            .zip(grow)
                            .zip(mrow)
                            .filter(|(_, &m)| m != 0.0)
                            .map(|((y, go), _)| y * go)
                            .sum();
                        for j in 0..n {
                            if mrow[j] != 0.0 {
                                g[r * n + j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::Dropout { a, keep } => {
                if self.needs(*a) {
                    let g = self.entries[a.0].grad.as_mut().unwrap();
                    for ((gi, go), k) in g.iter_mut().zip(&gout).zip(keep) {
                        *gi += go * k;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs } => {
                if self.needs(*logits) {
                    let n = {
                        let (_, n) = self.dims(*logits);
                        n
                    };
                    let scale = gout[0] / mask.len() as f64;
                    let g = self.entries[logits.0].grad.as_mut().unwrap();
                    for &node in mask {
                        for j in 0..n {
                            let p = probs[node * n + j];
                            let t = if targets[node] == j { 1.0 } else { 0.0 };
                            g[node * n + j] += scale * (p - t);
                        }
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                if self.needs(*a) {
                    let (_, n) = self.dims(*a);
                    let g = self.entries[a.0].grad.as_mut().unwrap();
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            g[src * n + j] += gout[r * n + j];
                        }
                    }
                }
            }
            Op::ScaleRows { a, s } => {
                let n = cols;
                if self.needs(*a) {
                    let sv = self.entries[s.0].value.clone();
                    let g = self.entries[a.0].grad.as_mut().unwrap();
                    for r in 0..rows {
                        for j in 0..n {
                            g[r * n + j] += gout[r * n + j] * sv[r];
                        }
                    }
                }
                if self.needs(*s) {
                    let av = self.entries[a.0].value.clone();
                    let g = self.entries[s.0].grad.as_mut().unwrap();
                    for r in 0..rows {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += av[r * n + j] * gout[r * n + j];
                        }
                        g[r] += acc;
                    }
                }
            }
            Op::SegmentSoftmax { a, offsets } => {
                if self.needs(*a) {
                    let out = self.entries[i].value.clone();
                    let g = self.entries[a.0].grad.as_mut().unwrap();
                    for w in offsets.windows(2) {
                        let (lo, hi) = (w[0], w[1]);
                        let dot: f64 = (lo..hi).map(|k| out[k] * gout[k]).sum();
                        for k in lo..hi {
                            g[k] += out[k] * (gout[k] - dot);
                        }
                    }
                }
            }
            Op::SegmentSumRows { a, offsets } => {
                if self.needs(*a) {
                    let (_, n) = self.dims(*a);
                    let g = self.entries[a.0].grad.as_mut().unwrap();
                    for (s, w) in offsets.windows(2).enumerate() {
                        for k in w[0]..w[1] {
                            for j in 0..n {
                                g[k * n + j] += gout[s * n + j];
                            }
                        }
                    }
                }
            }
            Op::MaskedColMean { a, positions, counts } => {
                if self.needs(*a) {
                    let (_, n) = self.dims(*a);
                    let g = self.entries[a.0].grad.as_mut().unwrap();
                    for &(r, j) in positions {
                        g[r * n + j] += gout[j] / counts[j].max(1) as f64;
                    }
                }
            }
            Op::ScaleBy { a, s } => {
                if self.needs(*a) {
                    let k = self.entries[s.0].value[0];
                    let g = self.entries[a.0].grad.as_mut().unwrap();
                    for (gi, go) in g.iter_mut().zip(&gout) {
                        *gi += go * k;
                    }
                }
                if self.needs(*s) {
                    let av = self.entries[a.0].value.clone();
                    let dot: f64 = av.iter().zip(&gout).map(|(x, go)| x * go).sum();
                    let g = self.entries[s.0].grad.as_mut().unwrap();
                    g[0] += dot;
                }
            }
        }
        self.entries[i].op = op;
        self.entries[i].grad = Some(gout);
    }
}

fn check_offsets(op: &'static str, offsets: &[usize], total: usize) -> Result<()> {
    let ok = offsets.len() >= 2
        && offsets[0] == 0
        && *offsets.last().unwrap() == total
        && offsets.windows(2).all(|w| w[0] <= w[1]);
    if ok {
        Ok(())
    } else {
        Err(TensorError::Shape { op, detail: format!("bad segment offsets (total {total})") })
    }
}
