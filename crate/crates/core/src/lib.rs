//! Multimodal transformer for incomplete tabular data.
//!
//! Each modality is tokenized feature by feature and passed through its own
//! masked-attention encoder; missing cells never enter the attention
//! computation. Modality representations are concatenated and fused by a
//! shared masked encoder before a linear classification head.

pub mod error;
pub mod data;
pub mod evaluation;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod report;
pub mod training;

pub use error::{Error, Result};
