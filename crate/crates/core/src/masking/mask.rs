use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

/// Per-token observed flags for one token sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObservedVector(Vec<bool>);

impl ObservedVector {
    pub fn new(flags: Vec<bool>) -> Self {
        ObservedVector(flags)
    }

    pub fn all_observed(tokens: usize) -> Self {
        ObservedVector(vec![true; tokens])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.0.iter().filter(|&&o| o).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    /// `1.0` for observed tokens and `0.0` otherwise.
    pub fn keep_factors(&self) -> Vec<f64> {
        self.0.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect()
    }

    /// Token sequence obtained by appending `other` after `self`.
    pub fn concat(&self, other: &ObservedVector) -> ObservedVector {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        ObservedVector(v)
    }
}

impl From<Vec<bool>> for ObservedVector {
    fn from(flags: Vec<bool>) -> Self {
        ObservedVector(flags)
    }
}

impl From<&[bool]> for ObservedVector {
    fn from(flags: &[bool]) -> Self {
        ObservedVector(flags.to_vec())
    }
}

/// Square additive attention mask with entries `0` or `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    tokens: usize,
    data: Vec<f64>,
}

/// Column `j` is all `-inf` exactly when token `j` is unobserved; every
/// other entry is `0`.
pub fn build_mask(obs: &ObservedVector) -> MaskMatrix {
    let t = obs.len();
    let mut data = Vec::with_capacity(t * t);
    for _ in 0..t {
        data.extend(obs.as_slice().iter().map(|&o| if o { 0.0 } else { f64::NEG_INFINITY }));
    }
    MaskMatrix { tokens: t, data }
}

impl MaskMatrix {
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.tokens + col]
    }

    pub fn transpose(&self) -> MaskMatrix {
        let t = self.tokens;
        let mut data = vec![0.0; t * t];
        for r in 0..t {
            for c in 0..t {
                data[c * t + r] = self.data[r * t + c];
            }
        }
        MaskMatrix { tokens: t, data }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.tokens, self.tokens], self.data.clone()).expect("square mask")
    }
}

/// Stacks the masks of a batch of equally long sequences into a
/// `[batch, t, t]` tensor, together with its per-matrix transpose.
pub fn batch_masks(obs: &[ObservedVector]) -> (Tensor, Tensor) {
    let t = obs.first().map_or(0, ObservedVector::len);
    let mut m = Vec::with_capacity(obs.len() * t * t);
    let mut mt = Vec::with_capacity(obs.len() * t * t);
    for o in obs {
        assert_eq!(o.len(), t, "batch sequences differ in length");
        let mask = build_mask(o);
        m.extend_from_slice(&mask.data);
        mt.extend_from_slice(&mask.transpose().data);
    }
    let shape = vec![obs.len(), t, t];
    (
        Tensor::new(shape.clone(), m).expect("mask shape"),
        Tensor::new(shape, mt).expect("mask shape"),
    )
}
