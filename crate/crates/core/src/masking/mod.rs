//! Attention masks, MCAR injection and missingness regularizers.

mod dropout;
mod mask;
mod mcar;

pub use dropout::{feature_dropout, modality_dropout, regularize};
pub use mask::{batch_masks, build_mask, MaskMatrix, ObservedVector};
pub use mcar::{inject_mcar, injection_target, missing_rate, MissingnessPlan, Scenario, Scope};
