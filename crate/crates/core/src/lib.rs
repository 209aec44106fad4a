//! Imbalanced multimodal emotion classification.
//!
//! Audio-frame and text-token feature sequences are encoded by per-modality
//! MLPs and single-head transformer stacks, mean-pooled, fused, and classified.
//! Models are trained with cross-entropy or focal loss under uniform or
//! prior-based class weights, combined by majority vote, and scored with
//! Macro-F1, weighted (balanced) and unweighted accuracy.

pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
