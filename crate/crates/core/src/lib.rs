//! Multi-adapter span-extraction QA at desk scale.
//!
//! A small transformer encoder shares its backbone across per-dataset
//! adapter experts. Experts are trained jointly on mixed mini-batches, then
//! refined separately with the backbone frozen, and composed for new
//! datasets by parameter averaging, probability ensembling, or loss-weighted
//! mixtures with few-shot fine-tuning.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use tensor::{Tensor, TensorError};
