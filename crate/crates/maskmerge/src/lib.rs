//! Merge fine-tuned sibling transformer encoders into one multitask model,
//! weighting parameters by the Fisher information of per-head and per-filter
//! mask nodes.
//!
//! The pipeline: estimate the diagonal Fisher information of (H + D) x L
//! constant-1 mask nodes on each fine-tuned model's own training data, map
//! those node values onto query/key and feed-forward-filter parameter blocks,
//! and take the Fisher-weighted elementwise average. Simple averaging and
//! full-parameter diagonal Fisher weighting are provided as baselines, along
//! with a desk-scale synthetic-task harness that runs the pairwise
//! merge-and-evaluate protocol end to end.

pub mod error;
pub mod tensor;
pub mod model;
pub mod grad;
pub mod fisher;
pub mod merge;
pub mod io;
pub mod harness;

pub use error::{Error, Result};
pub use tensor::Tensor;
