use log::warn;
use serde::{Deserialize, Serialize};

use super::{FeatureKind, MultimodalDataset, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureScaler {
    /// `(v - min) / (max - min)`, no clipping.
    MinMax { min: f64, max: f64 },
    /// Used when a numerical feature had no observed training cell.
    Identity,
    /// `seen[c]` is true when category `c` occurred in the fitting rows.
    Categorical { seen: Vec<bool> },
}

impl FeatureScaler {
    pub fn transform(&self, value: f64) -> f64 {
        match self {
            FeatureScaler::MinMax { min, max } => (value - min) / (max - min),
            FeatureScaler::Identity => value,
            FeatureScaler::Categorical { seen } => {
                let unknown = seen.len() as f64;
                if value >= 0.0 && value.fract() == 0.0 && seen.get(value as usize).copied().unwrap_or(false) {
                    value
                } else {
                    unknown
                }
            }
        }
    }

    /// Maps a scaled numerical value back to raw units.
    pub fn inverse(&self, value: f64) -> f64 {
        match self {
            FeatureScaler::MinMax { min, max } => value * (max - min) + min,
            _ => value,
        }
    }
}

/// Min-Max scaling and category vocabularies fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub modalities: Vec<Vec<FeatureScaler>>,
}

pub fn fit_preprocessor(ds: &MultimodalDataset, train_indices: &[usize]) -> Result<Preprocessor> {
    if train_indices.is_empty() {
        return Err(Error::InvalidArgument("cannot fit a preprocessor on zero rows".into()));
    }
    let mut modalities = Vec::with_capacity(ds.n_modalities());
    for m in &ds.modalities {
        let mut scalers = Vec::with_capacity(m.width());
        for (f, feat) in m.schema().iter().enumerate() {
            let observed = train_indices
                .iter()
                .filter(|&&s| m.is_observed(s, f))
                .map(|&s| m.value(s, f));
            let scaler = match feat.kind {
                FeatureKind::Numerical => {
                    let (lo, hi) = observed.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    });
                    if lo > hi {
                        warn!(
                            "feature `{}` of modality `{}` has no observed training value; leaving it unscaled",
                            feat.name, m.name
                        );
                        FeatureScaler::Identity
                    } else if lo == hi {
                        FeatureScaler::MinMax { min: lo, max: lo + 1.0 }
                    } else {
                        FeatureScaler::MinMax { min: lo, max: hi }
                    }
                }
                FeatureKind::Categorical => {
                    let mut seen = vec![false; feat.categories.len()];
                    for v in observed {
                        if let Some(slot) = seen.get_mut(v as usize) {
                            *slot = true;
                        }
                    }
                    FeatureScaler::Categorical { seen }
                }
            };
            scalers.push(scaler);
        }
        modalities.push(scalers);
    }
    Ok(Preprocessor { modalities })
}

impl Preprocessor {
    fn check(&self, ds: &MultimodalDataset) -> Result<()> {
        let ok = self.modalities.len() == ds.n_modalities()
            && self.modalities.iter().zip(&ds.modalities).all(|(sc, m)| {
                sc.len() == m.width()
                    && sc.iter().zip(m.schema()).all(|(s, f)| match (s, f.kind) {
                        (FeatureScaler::Categorical { seen }, FeatureKind::Categorical) => {
                            seen.len() == f.categories.len()
                        }
                        (FeatureScaler::Categorical { .. }, _) | (_, FeatureKind::Categorical) => false,
                        _ => true,
                    })
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Data("preprocessor does not match the dataset schema".into()))
        }
    }

    /// Transforms rows `indices` of `ds`. Observed flags are carried over
    /// untouched and unobserved cells keep their placeholder.
    pub fn apply(&self, ds: &MultimodalDataset, indices: &[usize]) -> Result<MultimodalDataset> {
        self.check(ds)?;
        let mut out = ds.subset(indices);
        for (m, scalers) in out.modalities.iter_mut().zip(&self.modalities) {
            for s in 0..m.n_samples() {
                for (f, sc) in scalers.iter().enumerate() {
                    if m.is_observed(s, f) {
                        m.set_value(s, f, sc.transform(m.value(s, f)));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Transforms every row of `ds`.
    pub fn apply_all(&self, ds: &MultimodalDataset) -> Result<MultimodalDataset> {
        let all: Vec<usize> = (0..ds.n_samples()).collect();
        self.apply(ds, &all)
    }
}

/// Expands a (preprocessed) sample into a flat vector with one slot per
/// numerical feature and one indicator slot per category (plus the unknown
/// slot) for categorical features. Unobserved features yield `None` slots.
pub fn one_hot_encode(ds: &MultimodalDataset, sample: &Sample) -> Vec<Option<f64>> {
    let mut out = Vec::new();
    for (m, cells) in ds.modalities.iter().zip(&sample.modalities) {
        for (f, feat) in m.schema().iter().enumerate() {
            let observed = cells.observed[f];
            match feat.kind {
                FeatureKind::Numerical => out.push(observed.then_some(cells.values[f])),
                FeatureKind::Categorical => {
                    let k = feat.categories.len() + 1;
                    let hot = cells.values[f] as usize;
                    out.extend((0..k).map(|c| observed.then_some(if c == hot { 1.0 } else { 0.0 })));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureSchema, Modality};

    fn ds(values: Vec<f64>, observed: Vec<bool>) -> MultimodalDataset {
        let n = observed.len() / 2;
        let m = Modality::new(
            "m",
            vec![FeatureSchema::numerical("x"), FeatureSchema::categorical("c", ["a", "b", "z"])],
            values,
            observed,
        )
        .unwrap();
        MultimodalDataset::new(
            vec![m],
            (0..n).map(|i| i % 2).collect(),
            vec!["0".into(), "1".into()],
            (0..n).map(|i| format!("s{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn min_max_from_observed_training_cells() {
        let d = ds(
            vec![0.0, 0.0, 5.0, 1.0, 10.0, 0.0, 99.0, 2.0, 12.0, 2.0],
            vec![true, true, true, true, true, true, false, false, true, true],
        );
        let p = fit_preprocessor(&d, &[0, 1, 2, 3]).unwrap();
        assert_eq!(p.modalities[0][0], FeatureScaler::MinMax { min: 0.0, max: 10.0 });
        let out = p.apply(&d, &[1, 3, 4]).unwrap();
        let m = &out.modalities[0];
        assert_eq!(m.value(0, 0), 0.5);
        assert!(!m.is_observed(1, 0));
        assert_eq!(m.value(1, 0), 99.0);
        // test row outside the training range is not clipped
        assert!((m.value(2, 0) - 1.2).abs() < 1e-12);
        // category "z" (index 2) never observed in training rows -> unknown index 3
        assert_eq!(m.value(2, 1), 3.0);
        assert_eq!(m.value(0, 1), 1.0);
    }

    #[test]
    fn constant_feature_maps_to_zero() {
        let d = ds(vec![3.0, 0.0, 3.0, 0.0], vec![true, true, true, true]);
        let p = fit_preprocessor(&d, &[0, 1]).unwrap();
        assert_eq!(p.modalities[0][0], FeatureScaler::MinMax { min: 3.0, max: 4.0 });
        assert_eq!(p.apply_all(&d).unwrap().modalities[0].value(0, 0), 0.0);
    }

    #[test]
    fn no_observed_training_cell_gives_identity() {
        let d = ds(vec![3.0, 0.0, 7.0, 0.0], vec![false, true, true, true]);
        let p = fit_preprocessor(&d, &[0]).unwrap();
        assert_eq!(p.modalities[0][0], FeatureScaler::Identity);
        assert_eq!(p.apply_all(&d).unwrap().modalities[0].value(1, 0), 7.0);
        assert!(fit_preprocessor(&d, &[]).is_err());
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let d = ds(vec![3.0, 0.0, 7.0, 0.0], vec![true, true, true, true]);
        let p = Preprocessor {
            modalities: vec![vec![FeatureScaler::Identity]],
        };
        assert!(p.apply_all(&d).is_err());
    }

    #[test]
    fn one_hot_layout() {
        let d = ds(vec![0.25, 1.0, 0.0, 0.0], vec![true, true, false, false]);
        let enc = one_hot_encode(&d, &d.sample(0));
        assert_eq!(enc, vec![Some(0.25), Some(0.0), Some(1.0), Some(0.0), Some(0.0)]);
        let enc = one_hot_encode(&d, &d.sample(1));
        assert!(enc.iter().all(Option::is_none));
    }
}
