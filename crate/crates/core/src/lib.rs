//! Graph Decipher: a dual-attention graph network for node classification.
//!
//! The crate is organized around five subsystems:
//!
//! - [`graph`]: graph/feature/label data model, TSV ingestion, splits, and
//!   a planted-partition synthetic generator.
//! - [`tensor`]: dense-tensor reverse-mode differentiation, the primitives
//!   the network needs, a finite-difference checker, and Adam.
//! - [`fab`]: the feature attention branch — category partition,
//!   similarity sort, feature-map pooling/upsampling with masks, and
//!   category-oriented attention over feature dimensions.
//! - [`network`]: the node attention branch, single-head combination,
//!   multi-head layers, trainer, evaluator, and complexity accounting.
//! - [`augment`]: attention-guided minority oversampling (ORI/AA/AP/AN),
//!   two-class imbalance sweeps, and all-category rebalancing.

pub mod augment;
pub mod fab;
pub mod graph;
pub mod network;
pub mod report;
pub mod tensor;
