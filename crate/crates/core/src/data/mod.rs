//! Multimodal tabular datasets with explicit per-cell observed flags.

mod io;
mod preprocess;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, write_dataset, Manifest, ManifestModality, SchemaDescriptor, UnknownCategoryPolicy};
pub use preprocess::{fit_preprocessor, one_hot_encode, FeatureScaler, Preprocessor};
pub use split::{stratified_splits, stratified_splits_for_labels, FoldSplit};
pub use synth::{synthesize_dataset, SignalSpec, SynthSpec, MIN_SYNTH_SAMPLES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numerical,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl FeatureSchema {
    pub fn numerical(name: impl Into<String>) -> Self {
        FeatureSchema {
            name: name.into(),
            kind: FeatureKind::Numerical,
            categories: Vec::new(),
        }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, categories: impl IntoIterator<Item = S>) -> Self {
        FeatureSchema {
            name: name.into(),
            kind: FeatureKind::Categorical,
            categories: categories.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_categorical(&self) -> bool {
        self.kind == FeatureKind::Categorical
    }

    /// Index reserved for categories not seen during fitting.
    pub fn unknown_index(&self) -> usize {
        self.categories.len()
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == label)
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            FeatureKind::Categorical if self.categories.len() < 2 => Err(Error::Data(format!(
                "categorical feature `{}` declares {} categories (need at least 2)",
                self.name,
                self.categories.len()
            ))),
            FeatureKind::Numerical if !self.categories.is_empty() => Err(Error::Data(format!(
                "numerical feature `{}` declares categories",
                self.name
            ))),
            _ => Ok(()),
        }
    }
}

/// One group of features over all samples.
///
/// Cells are stored row-major as `values` plus `observed`. The value stored
/// in an unobserved cell is a placeholder and carries no meaning. Categorical
/// cells hold the category index as an integral `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Modality {
    pub name: String,
    schema: Vec<FeatureSchema>,
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl Modality {
    pub fn new(
        name: impl Into<String>,
        schema: Vec<FeatureSchema>,
        values: Vec<f64>,
        observed: Vec<bool>,
    ) -> Result<Self> {
        let name = name.into();
        if schema.is_empty() {
            return Err(Error::Data(format!("modality `{name}` has no features")));
        }
        for (i, f) in schema.iter().enumerate() {
            f.validate()?;
            if schema[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::Data(format!(
                    "duplicate feature name `{}` in modality `{name}`",
                    f.name
                )));
            }
        }
        let w = schema.len();
        if values.len() != observed.len() || !values.len().is_multiple_of(w) {
            return Err(Error::Data(format!(
                "modality `{name}`: grid of {} values / {} flags does not fit width {w}",
                values.len(),
                observed.len()
            )));
        }
        Ok(Modality {
            name,
            schema,
            values,
            observed,
        })
    }

    pub fn schema(&self) -> &[FeatureSchema] {
        &self.schema
    }

    pub fn width(&self) -> usize {
        self.schema.len()
    }

    pub fn n_samples(&self) -> usize {
        self.values.len() / self.width()
    }

    pub fn value(&self, sample: usize, feature: usize) -> f64 {
        self.values[sample * self.width() + feature]
    }

    pub fn is_observed(&self, sample: usize, feature: usize) -> bool {
        self.observed[sample * self.width() + feature]
    }

    pub fn row_values(&self, sample: usize) -> &[f64] {
        let w = self.width();
        &self.values[sample * w..(sample + 1) * w]
    }

    pub fn row_observed(&self, sample: usize) -> &[bool] {
        let w = self.width();
        &self.observed[sample * w..(sample + 1) * w]
    }

    /// A modality is present for a sample when at least one feature is observed.
    pub fn is_present(&self, sample: usize) -> bool {
        self.row_observed(sample).iter().any(|&o| o)
    }

    pub fn set_value(&mut self, sample: usize, feature: usize, value: f64) {
        let w = self.width();
        self.values[sample * w + feature] = value;
        self.observed[sample * w + feature] = true;
    }

    pub fn set_missing(&mut self, sample: usize, feature: usize) {
        let w = self.width();
        self.observed[sample * w + feature] = false;
    }

    /// Overwrites the stored value without touching the observed flag.
    pub fn set_placeholder(&mut self, sample: usize, feature: usize, value: f64) {
        let w = self.width();
        self.values[sample * w + feature] = value;
    }

    pub fn observed_flags(&self) -> &[bool] {
        &self.observed
    }

    pub fn missing_count(&self) -> usize {
        self.observed.iter().filter(|&&o| !o).count()
    }

    fn select(&self, indices: &[usize]) -> Modality {
        let w = self.width();
        let mut values = Vec::with_capacity(indices.len() * w);
        let mut observed = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            values.extend_from_slice(self.row_values(i));
            observed.extend_from_slice(self.row_observed(i));
        }
        Modality {
            name: self.name.clone(),
            schema: self.schema.clone(),
            values,
            observed,
        }
    }
}

/// Per-modality cells of a single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityCells {
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl ModalityCells {
    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn is_present(&self) -> bool {
        self.observed.iter().any(|&o| o)
    }
}

/// One sample across all modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub modalities: Vec<ModalityCells>,
}

impl Sample {
    pub fn observed_count(&self) -> usize {
        self.modalities.iter().map(ModalityCells::observed_count).sum()
    }

    pub fn present_modalities(&self) -> usize {
        self.modalities.iter().filter(|m| m.is_present()).count()
    }

    /// Observed flags of all tokens, modality after modality.
    pub fn flat_observed(&self) -> Vec<bool> {
        self.modalities.iter().flat_map(|m| m.observed.iter().copied()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalDataset {
    pub modalities: Vec<Modality>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub sample_ids: Vec<String>,
}

impl MultimodalDataset {
    pub fn new(
        modalities: Vec<Modality>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        let ds = MultimodalDataset {
            modalities,
            labels,
            class_names,
            sample_ids,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.modalities.is_empty() {
            return Err(Error::Data("dataset has no modalities".into()));
        }
        if self.class_names.len() < 2 {
            return Err(Error::Data("dataset needs at least 2 classes".into()));
        }
        if self.sample_ids.len() != n {
            return Err(Error::Data(format!(
                "{} sample ids for {n} labels",
                self.sample_ids.len()
            )));
        }
        if let Some(m) = self.modalities.iter().find(|m| m.n_samples() != n) {
            return Err(Error::Data(format!(
                "modality `{}` has {} samples, expected {n}",
                m.name,
                m.n_samples()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(Error::Data(format!("label index {l} out of range")));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.modalities.iter().map(Modality::width).collect()
    }

    pub fn total_features(&self) -> usize {
        self.widths().iter().sum()
    }

    pub fn schemas(&self) -> Vec<Vec<FeatureSchema>> {
        self.modalities.iter().map(|m| m.schema.clone()).collect()
    }

    pub fn sample(&self, index: usize) -> Sample {
        Sample {
            modalities: self
                .modalities
                .iter()
                .map(|m| ModalityCells {
                    values: m.row_values(index).to_vec(),
                    observed: m.row_observed(index).to_vec(),
                })
                .collect(),
        }
    }

    pub fn samples(&self, indices: &[usize]) -> Vec<Sample> {
        indices.iter().map(|&i| self.sample(i)).collect()
    }

    pub fn observed_count(&self, sample: usize) -> usize {
        self.modalities
            .iter()
            .map(|m| m.row_observed(sample).iter().filter(|&&o| o).count())
            .sum()
    }

    /// Samples that have no observed feature at all.
    pub fn empty_samples(&self) -> Vec<usize> {
        (0..self.n_samples()).filter(|&i| self.observed_count(i) == 0).collect()
    }

    /// Rows `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> MultimodalDataset {
        MultimodalDataset {
            modalities: self.modalities.iter().map(|m| m.select(indices)).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            sample_ids: indices.iter().map(|&i| self.sample_ids[i].clone()).collect(),
        }
    }

    /// Appends the rows of `other`, which must share the schema.
    pub fn stack(&self, other: &MultimodalDataset) -> Result<MultimodalDataset> {
        if self.schemas() != other.schemas() || self.class_names != other.class_names {
            return Err(Error::Data("cannot stack datasets with different schemas".into()));
        }
        let mut out = self.clone();
        for (m, o) in out.modalities.iter_mut().zip(&other.modalities) {
            m.values.extend_from_slice(&o.values);
            m.observed.extend_from_slice(&o.observed);
        }
        out.labels.extend_from_slice(&other.labels);
        out.sample_ids.extend(other.sample_ids.iter().cloned());
        Ok(out)
    }

    /// Writes the cells of `sample` back into row `index`.
    pub fn set_sample(&mut self, index: usize, sample: &Sample) {
        for (m, cells) in self.modalities.iter_mut().zip(&sample.modalities) {
            let w = m.width();
            m.values[index * w..(index + 1) * w].copy_from_slice(&cells.values);
            m.observed[index * w..(index + 1) * w].copy_from_slice(&cells.observed);
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MultimodalDataset {
        let m1 = Modality::new(
            "a",
            vec![FeatureSchema::numerical("x"), FeatureSchema::categorical("c", ["u", "v"])],
            vec![1.0, 0.0, 2.0, 1.0, 3.0, 0.0],
            vec![true, true, false, true, true, false],
        )
        .unwrap();
        MultimodalDataset::new(
            vec![m1],
            vec![0, 1, 0],
            vec!["n".into(), "p".into()],
            vec!["s1".into(), "s2".into(), "s3".into()],
        )
        .unwrap()
    }

    #[test]
    fn categorical_needs_two_categories() {
        let bad = Modality::new("m", vec![FeatureSchema::categorical("c", ["only"])], vec![0.0], vec![true]);
        assert!(bad.is_err());
    }

    #[test]
    fn duplicate_feature_names_rejected() {
        let bad = Modality::new(
            "m",
            vec![FeatureSchema::numerical("x"), FeatureSchema::numerical("x")],
            vec![0.0, 0.0],
            vec![true, true],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn subset_and_stack() {
        let ds = tiny();
        let sub = ds.subset(&[2, 0]);
        assert_eq!(sub.sample_ids, vec!["s3", "s1"]);
        assert_eq!(sub.modalities[0].row_values(0), &[3.0, 0.0]);
        let both = sub.stack(&ds).unwrap();
        assert_eq!(both.n_samples(), 5);
        assert_eq!(both.labels, vec![0, 0, 0, 1, 0]);
    }

    #[test]
    fn sample_round_trip() {
        let mut ds = tiny();
        let mut s = ds.sample(1);
        assert_eq!(s.observed_count(), 1);
        s.modalities[0].observed[0] = true;
        s.modalities[0].values[0] = 9.0;
        ds.set_sample(1, &s);
        assert_eq!(ds.sample(1), s);
        assert_eq!(ds.class_counts(), vec![2, 1]);
    }
}
