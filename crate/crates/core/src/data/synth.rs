use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FeatureSchema, Modality, MultimodalDataset};
use crate::error::{Error, Result};

pub const MIN_SYNTH_SAMPLES: usize = 50;

/// How strongly features depend on the class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalSpec {
    /// Gap between class means on every numerical feature, in noise standard
    /// deviations. Zero makes the numerical features uninformative.
    pub separation: f64,
    /// Trailing features of each modality that are categorical.
    pub categorical_per_modality: usize,
    pub categories: usize,
    /// Probability mass moved onto the class-preferred category, in `[0, 1]`.
    pub categorical_strength: f64,
}

impl Default for SignalSpec {
    fn default() -> Self {
        SignalSpec {
            separation: 1.0,
            categorical_per_modality: 0,
            categories: 3,
            categorical_strength: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub modality_widths: Vec<usize>,
    pub class_count: usize,
    pub signal: SignalSpec,
    /// Fraction of cells left unobserved from the start.
    pub missing_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            n_samples: 500,
            modality_widths: vec![4, 3],
            class_count: 2,
            signal: SignalSpec::default(),
            missing_rate: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.n_samples < MIN_SYNTH_SAMPLES {
            return bad(
                "n_samples",
                format!("{} is below the minimum of {MIN_SYNTH_SAMPLES}", self.n_samples),
            );
        }
        if self.modality_widths.is_empty() || self.modality_widths.contains(&0) {
            return bad("modality_widths", "every modality needs at least one feature".into());
        }
        if self.class_count < 2 {
            return bad("class_count", "need at least 2 classes".into());
        }
        let s = &self.signal;
        if !(s.separation.is_finite() && s.separation >= 0.0) {
            return bad("signal.separation", "must be finite and non-negative".into());
        }
        if self.modality_widths.iter().any(|&w| s.categorical_per_modality > w) {
            return bad(
                "signal.categorical_per_modality",
                "exceeds the width of a modality".into(),
            );
        }
        if s.categories < 2 {
            return bad("signal.categories", "need at least 2 categories".into());
        }
        if !(0.0..=1.0).contains(&s.categorical_strength) {
            return bad("signal.categorical_strength", "must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate", "must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Draws a dataset from class-conditional unit-variance Gaussians (numerical
/// features) and class-tilted categorical distributions.
///
/// For two classes the numerical means are `±separation / 2` with a random
/// sign per feature, so the class means differ by exactly `separation` on
/// every numerical feature.
pub fn synthesize_dataset(spec: &SynthSpec) -> Result<MultimodalDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_samples;
    let classes = spec.class_count;
    let sig = &spec.signal;

    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);

    let mut modalities = Vec::with_capacity(spec.modality_widths.len());
    for (mi, &width) in spec.modality_widths.iter().enumerate() {
        let name = format!("m{}", mi + 1);
        let n_cat = sig.categorical_per_modality;
        let n_num = width - n_cat;
        let mut schema = Vec::with_capacity(width);
        for f in 0..n_num {
            schema.push(FeatureSchema::numerical(format!("{name}_x{f}")));
        }
        for f in 0..n_cat {
            schema.push(FeatureSchema::categorical(
                format!("{name}_c{f}"),
                (0..sig.categories).map(|k| format!("k{k}")),
            ));
        }

        // class means for the numerical block
        let mut means = vec![vec![0.0; n_num]; classes];
        for f in 0..n_num {
            let sign: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
            for (c, row) in means.iter_mut().enumerate() {
                row[f] = if classes == 2 {
                    if c == 1 { sign } else { -sign }
                } else if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                } * sig.separation
                    / 2.0;
            }
        }

        let mut values = Vec::with_capacity(n * width);
        for &label in &labels {
            for mean in &means[label] {
                let noise: f64 = rng.sample(StandardNormal);
                values.push(mean + noise);
            }
            for f in 0..n_cat {
                let preferred = (label + f + mi) % sig.categories;
                let cat = if rng.random::<f64>() < sig.categorical_strength {
                    preferred
                } else {
                    rng.random_range(0..sig.categories)
                };
                values.push(cat as f64);
            }
        }
        modalities.push((name, schema, values));
    }

    let total: usize = spec.modality_widths.iter().sum();
    let mut observed = vec![vec![true; total]; n];
    if spec.missing_rate > 0.0 {
        for row in observed.iter_mut() {
            for cell in row.iter_mut() {
                *cell = rng.random::<f64>() >= spec.missing_rate;
            }
            if !row.iter().any(|&o| o) {
                let keep = rng.random_range(0..total);
                row[keep] = true;
            }
        }
    }

    let mut offset = 0;
    let mut built = Vec::with_capacity(modalities.len());
    for (name, schema, values) in modalities {
        let w = schema.len();
        let obs: Vec<bool> = observed.iter().flat_map(|r| r[offset..offset + w].iter().copied()).collect();
        offset += w;
        built.push(Modality::new(name, schema, values, obs)?);
    }
    MultimodalDataset::new(
        built,
        labels,
        (0..classes).map(|c| format!("class{c}")).collect(),
        (0..n).map(|i| format!("s{i:05}")).collect(),
    )
}
