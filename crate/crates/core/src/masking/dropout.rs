use rand::seq::index;
use rand::Rng;

use crate::data::{ModalityCells, Sample};

/// With probability `apply_prob`, hides `c` uniformly chosen present
/// modalities, `c` drawn uniformly from `1..v` where `v` is the number of
/// present modalities. Returns `c` (zero when nothing was hidden).
pub fn modality_dropout<R: Rng + ?Sized>(sample: &mut Sample, apply_prob: f64, rng: &mut R) -> usize {
    let present: Vec<usize> = (0..sample.modalities.len())
        .filter(|&m| sample.modalities[m].is_present())
        .collect();
    let v = present.len();
    if v < 2 || !rng.random_bool(apply_prob) {
        return 0;
    }
    let c = rng.random_range(1..v);
    for k in index::sample(rng, v, c) {
        sample.modalities[present[k]].observed.fill(false);
    }
    c
}

/// Feature-level counterpart of [`modality_dropout`] within one modality.
pub fn feature_dropout<R: Rng + ?Sized>(cells: &mut ModalityCells, apply_prob: f64, rng: &mut R) -> usize {
    let observed: Vec<usize> = (0..cells.observed.len()).filter(|&f| cells.observed[f]).collect();
    let v = observed.len();
    if v < 2 || !rng.random_bool(apply_prob) {
        return 0;
    }
    let c = rng.random_range(1..v);
    for k in index::sample(rng, v, c) {
        cells.observed[observed[k]] = false;
    }
    c
}

/// Modality dropout followed by feature dropout on every modality that is
/// still present.
pub fn regularize<R: Rng + ?Sized>(sample: &mut Sample, apply_prob: f64, rng: &mut R) {
    modality_dropout(sample, apply_prob, rng);
    for cells in sample.modalities.iter_mut().filter(|c| c.is_present()) {
        feature_dropout(cells, apply_prob, rng);
    }
}
