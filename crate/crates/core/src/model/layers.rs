use crate::data::{FeatureKind, FeatureSchema};
use crate::error::{Error, Result};
use crate::masking::{batch_masks, ObservedVector};
use crate::numerics::{Tape, Tensor, Var, LAYER_NORM_EPS};

/// Row layout of an embedding table over an ordered feature list.
///
/// Row 0 is the shared missing row and stays all-zero. A numerical feature
/// owns two rows (direction, bias); a categorical feature with `K`
/// categories owns `K + 1` rows, the last being its unknown-category row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    offsets: Vec<usize>,
    kinds: Vec<(FeatureKind, usize)>,
    rows: usize,
}

/// Gather plan for one batch: token `i` embeds as
/// `coef[i] * table[scaled[i]] + bias_coef[i] * table[added[i]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub tokens: usize,
    pub scaled: Vec<usize>,
    pub coef: Vec<f64>,
    pub added: Vec<usize>,
    pub bias_coef: Vec<f64>,
    pub observed: Vec<ObservedVector>,
}

impl TokenLayout {
    pub fn new<'a>(features: impl IntoIterator<Item = &'a FeatureSchema>) -> Self {
        let mut offsets = Vec::new();
        let mut kinds = Vec::new();
        let mut rows = 1;
        for f in features {
            offsets.push(rows);
            let k = f.categories.len();
            kinds.push((f.kind, k));
            rows += match f.kind {
                FeatureKind::Numerical => 2,
                FeatureKind::Categorical => k + 1,
            };
        }
        TokenLayout { offsets, kinds, rows }
    }

    pub fn table_rows(&self) -> usize {
        self.rows
    }

    pub fn tokens(&self) -> usize {
        self.offsets.len()
    }

    /// Builds the gather plan for rows given as `(values, observed)` pairs.
    /// Values at unobserved positions are never read.
    pub fn encode<'a>(&self, rows: impl IntoIterator<Item = (&'a [f64], &'a [bool])>) -> Result<TokenBatch> {
        let t = self.tokens();
        let mut out = TokenBatch {
            batch: 0,
            tokens: t,
            scaled: Vec::new(),
            coef: Vec::new(),
            added: Vec::new(),
            bias_coef: Vec::new(),
            observed: Vec::new(),
        };
        for (values, observed) in rows {
            if values.len() != t || observed.len() != t {
                return Err(Error::shape("embed", &[values.len()], &[t]));
            }
            for f in 0..t {
                let off = self.offsets[f];
                let (scaled, coef, added, bias_coef) = if !observed[f] {
                    (0, 0.0, 0, 0.0)
                } else {
                    match self.kinds[f] {
                        (FeatureKind::Numerical, _) => (off, values[f], off + 1, 1.0),
                        (FeatureKind::Categorical, k) => {
                            let v = values[f];
                            if !(v >= 0.0 && v.fract() == 0.0 && v <= k as f64) {
                                return Err(Error::Inference(format!(
                                    "category index {v} outside the vocabulary of {k} categories"
                                )));
                            }
                            (off + v as usize, 1.0, 0, 0.0)
                        }
                    }
                };
                out.scaled.push(scaled);
                out.coef.push(coef);
                out.added.push(added);
                out.bias_coef.push(bias_coef);
            }
            out.observed.push(ObservedVector::from(observed));
            out.batch += 1;
        }
        Ok(out)
    }
}

/// Looks up token embeddings, returning `[batch, tokens, d]`.
pub fn embed(tape: &Tape, table: Var, tokens: &TokenBatch) -> Result<Var> {
    let d = tape.shape(table)[1];
    let dir = tape.embedding_gather(table, &tokens.scaled)?;
    let dir = tape.scale_rows(dir, &tokens.coef)?;
    let bias = tape.embedding_gather(table, &tokens.added)?;
    let bias = tape.scale_rows(bias, &tokens.bias_coef)?;
    let x = tape.add(dir, bias)?;
    tape.reshape(x, &[tokens.batch, tokens.tokens, d])
}

/// Additive masks and row keep-factors for a batch of token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMask {
    pub mask: Tensor,
    pub mask_t: Tensor,
    pub keep: Vec<f64>,
}

impl BatchMask {
    pub fn new(obs: &[ObservedVector]) -> Self {
        let (mask, mask_t) = batch_masks(obs);
        let keep = obs.iter().flat_map(ObservedVector::keep_factors).collect();
        BatchMask { mask, mask_t, keep }
    }
}

/// Per-head projections `[d, d/h]` and the output projection `[d, d]`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Var,
}

/// Multi-head attention in which, per head,
/// `A = ReLU(softmax(Q K^T / sqrt(d_h) + M) + M^T)` and the head output is
/// `A V`. Heads are concatenated and projected by `wo`. `x` is
/// `[batch, t, d]`.
pub fn msa(tape: &Tape, x: Var, masks: &BatchMask, w: &AttentionWeights) -> Result<Var> {
    let mt = tape.constant(masks.mask_t.clone());
    let mut heads = Vec::with_capacity(w.wq.len());
    for h in 0..w.wq.len() {
        let dh = tape.shape(w.wq[h])[1];
        let q = tape.matmul(x, w.wq[h])?;
        let k = tape.matmul(x, w.wk[h])?;
        let v = tape.matmul(x, w.wv[h])?;
        let scores = tape.matmul(q, tape.transpose(k)?)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let att = tape.masked_softmax(scores, &masks.mask)?;
        let att = tape.relu(tape.add(att, mt)?)?;
        heads.push(tape.matmul(att, v)?);
    }
    let cat = tape.concat(&heads, 2)?;
    tape.matmul(cat, w.wo)
}

#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub attn: AttentionWeights,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// Post-norm transformer block around [`msa`]. Rows of unobserved tokens are
/// zeroed on the way out so that residual paths cannot revive them.
pub fn encoder_block(tape: &Tape, x: Var, masks: &BatchMask, w: &BlockWeights) -> Result<Var> {
    let a = msa(tape, x, masks, &w.attn)?;
    let h = tape.layer_norm(tape.add(x, a)?, w.ln1_gain, w.ln1_bias, LAYER_NORM_EPS)?;
    let f = tape.relu(tape.add(tape.matmul(h, w.ff1_w)?, w.ff1_b)?)?;
    let f = tape.add(tape.matmul(f, w.ff2_w)?, w.ff2_b)?;
    let out = tape.layer_norm(tape.add(h, f)?, w.ln2_gain, w.ln2_bias, LAYER_NORM_EPS)?;
    tape.scale_rows(out, &masks.keep)
}
