//! Masked-attention encoders and the three fusion wirings built from them.
//!
//! * intermediate: one encoder stack per modality, token-wise concatenation,
//!   a shared masked stack, then a linear head over the flattened tokens;
//! * early: a single stack over all features of all modalities;
//! * late: one stack plus head per modality, whose class probabilities are
//!   averaged over the modalities present in a sample.

mod checkpoint;
mod layers;
mod params;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSchema, MultimodalDataset, Sample};
use crate::error::{Error, Result};
use crate::masking::ObservedVector;
use crate::numerics::{softmax_row, Tape, Tensor, Var};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use layers::{embed, encoder_block, msa, AttentionWeights, BatchMask, BlockWeights, TokenBatch, TokenLayout};
pub use params::{Bound, ParamStore};

/// Rows per forward pass when scoring many samples.
const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Token width `d_e`.
    pub d_e: usize,
    pub heads: usize,
    /// Blocks per modality stack (and of the single stack in early/late fusion).
    pub layers: usize,
    pub ff_width: usize,
    /// Blocks of the shared stack used by intermediate fusion.
    pub shared_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_e: 32,
            heads: 4,
            layers: 2,
            ff_width: 64,
            shared_layers: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_e == 0 || self.ff_width == 0 {
            return Err(Error::config("model.d_e", "token and feed-forward widths must be positive"));
        }
        if self.heads == 0 || !self.d_e.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!("{} heads do not divide d_e = {}", self.heads, self.d_e),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_e / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Intermediate,
    Early,
    Late,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Intermediate, FusionMode::Early, FusionMode::Late];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Intermediate => "intermediate",
            FusionMode::Early => "early",
            FusionMode::Late => "late",
        }
    }

    /// Name of the architecture used in report rows.
    pub fn model_name(self) -> &'static str {
        match self {
            FusionMode::Intermediate => "MARIA",
            FusionMode::Early | FusionMode::Late => "NAIM",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "intermediate" => Ok(FusionMode::Intermediate),
            "early" => Ok(FusionMode::Early),
            "late" => Ok(FusionMode::Late),
            _ => Err(format!("unknown fusion mode `{s}` (expected intermediate, early or late)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub features: Vec<FeatureSchema>,
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub fusion: FusionMode,
    pub modalities: Vec<ModalitySpec>,
    pub classes: Vec<String>,
}

impl ModelSpec {
    pub fn for_dataset(ds: &MultimodalDataset, encoder: EncoderConfig, fusion: FusionMode) -> Self {
        ModelSpec {
            encoder,
            fusion,
            modalities: ds
                .modalities
                .iter()
                .map(|m| ModalitySpec {
                    name: m.name.clone(),
                    features: m.schema().to_vec(),
                })
                .collect(),
            classes: ds.class_names.clone(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.features.len()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.modalities.is_empty() || self.modalities.iter().any(|m| m.features.is_empty()) {
            return Err(Error::InvalidArgument("every modality needs at least one feature".into()));
        }
        if self.classes.len() < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        Ok(())
    }

    /// Encoder stacks in parameter-initialization order.
    fn stacks(&self) -> Vec<Stack> {
        let n = self.modalities.len();
        match self.fusion {
            FusionMode::Intermediate => (0..n).map(|i| Stack::new(self, format!("mod{i}"), vec![i])).collect(),
            FusionMode::Early => vec![Stack::new(self, "early".into(), (0..n).collect())],
            FusionMode::Late => (0..n).map(|i| Stack::new(self, format!("late{i}"), vec![i])).collect(),
        }
    }

    fn head_prefix(&self, member: usize) -> String {
        match self.fusion {
            FusionMode::Late => format!("late{member}.head"),
            _ => "head".into(),
        }
    }
}

/// One embedding table followed by `layers` blocks.
struct Stack {
    prefix: String,
    modalities: Vec<usize>,
    layout: TokenLayout,
}

impl Stack {
    fn new(spec: &ModelSpec, prefix: String, modalities: Vec<usize>) -> Stack {
        let layout = TokenLayout::new(modalities.iter().flat_map(|&m| spec.modalities[m].features.iter()));
        Stack { prefix, modalities, layout }
    }

    fn tokens(&self, samples: &[Sample]) -> Result<TokenBatch> {
        let rows: Vec<(Vec<f64>, Vec<bool>)> = samples
            .iter()
            .map(|s| {
                let mut values = Vec::new();
                let mut observed = Vec::new();
                for &m in &self.modalities {
                    values.extend_from_slice(&s.modalities[m].values);
                    observed.extend_from_slice(&s.modalities[m].observed);
                }
                (values, observed)
            })
            .collect();
        self.layout.encode(rows.iter().map(|(v, o)| (v.as_slice(), o.as_slice())))
    }
}

/// Output of one encoder block, captured for inspection.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    /// Parameter prefix of the block, e.g. `mod0.block1` or `shared.block0`.
    pub name: String,
    pub observed: Vec<ObservedVector>,
    /// `[batch, tokens, d_e]`.
    pub value: Tensor,
}

type Trace = Vec<(String, Vec<ObservedVector>, Var)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MariaModel {
    spec: ModelSpec,
    params: ParamStore,
}

impl MariaModel {
    /// Freshly initialized model; initialization is deterministic per seed.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = spec.encoder.clone();
        let d = cfg.d_e;
        let mut params = ParamStore::new();
        let stacks = spec.stacks();
        for stack in &stacks {
            let rows = stack.layout.table_rows();
            let mut table = params::glorot(&mut rng, rows, d);
            table.data_mut()[..d].fill(0.0);
            let name = format!("{}.emb", stack.prefix);
            params.insert(name.clone(), table);
            params.freeze_rows(name, vec![0]);
            for l in 0..cfg.layers {
                init_block(&mut params, &mut rng, &format!("{}.block{l}", stack.prefix), &cfg);
            }
        }
        if spec.fusion == FusionMode::Intermediate {
            for l in 0..cfg.shared_layers {
                init_block(&mut params, &mut rng, &format!("shared.block{l}"), &cfg);
            }
        }
        let c = spec.n_classes();
        for (member, stack) in stacks.iter().enumerate() {
            if spec.fusion != FusionMode::Late && member > 0 {
                break;
            }
            let tokens = match spec.fusion {
                FusionMode::Late => stack.layout.tokens(),
                _ => spec.widths().iter().sum(),
            };
            let head = spec.head_prefix(member);
            params.insert(format!("{head}.w"), params::glorot(&mut rng, tokens * d, c));
            params.insert(format!("{head}.b"), Tensor::zeros(&[c]));
        }
        Ok(MariaModel { spec, params })
    }

    /// Reassembles a model, checking that `params` match the layout of `spec`.
    pub fn from_parts(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        let reference = MariaModel::new(spec.clone(), 0)?;
        let same_layout = reference.params.len() == params.len()
            && reference
                .params
                .iter()
                .all(|(name, t)| params.get(name).is_some_and(|p| p.shape() == t.shape()));
        if !same_layout {
            return Err(Error::InvalidArgument("parameters do not match the model layout".into()));
        }
        Ok(MariaModel { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn fusion(&self) -> FusionMode {
        self.spec.fusion
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Independently trained parts: one per modality for late fusion,
    /// otherwise one.
    pub fn member_count(&self) -> usize {
        match self.spec.fusion {
            FusionMode::Late => self.spec.modalities.len(),
            _ => 1,
        }
    }

    /// Prefix of the parameters that belong to `member`, if members exist.
    pub fn member_prefix(&self, member: usize) -> Option<String> {
        (self.spec.fusion == FusionMode::Late).then(|| format!("late{member}."))
    }

    /// Whether `sample` can be used to train `member`.
    pub fn member_accepts(&self, member: usize, sample: &Sample) -> bool {
        match self.spec.fusion {
            FusionMode::Late => sample.modalities[member].is_present(),
            _ => sample.observed_count() > 0,
        }
    }

    fn check_samples(&self, samples: &[Sample]) -> Result<()> {
        let widths = self.spec.widths();
        for s in samples {
            let ok = s.modalities.len() == widths.len()
                && s.modalities.iter().zip(&widths).all(|(m, &w)| m.values.len() == w && m.observed.len() == w);
            if !ok {
                let got: Vec<usize> = s.modalities.iter().map(|m| m.values.len()).collect();
                return Err(Error::shape("model input", &got, &widths));
            }
        }
        Ok(())
    }

    fn block_weights(&self, bound: &Bound, prefix: &str) -> Result<BlockWeights> {
        let h = self.spec.encoder.heads;
        let heads = |kind: &str| -> Result<Vec<Var>> {
            (0..h).map(|i| bound.var(&format!("{prefix}.attn.{kind}{i}"))).collect()
        };
        let v = |suffix: &str| bound.var(&format!("{prefix}.{suffix}"));
        Ok(BlockWeights {
            attn: AttentionWeights {
                wq: heads("q")?,
                wk: heads("k")?,
                wv: heads("v")?,
                wo: v("attn.o")?,
            },
            ln1_gain: v("ln1.gain")?,
            ln1_bias: v("ln1.bias")?,
            ff1_w: v("ff1.w")?,
            ff1_b: v("ff1.b")?,
            ff2_w: v("ff2.w")?,
            ff2_b: v("ff2.b")?,
            ln2_gain: v("ln2.gain")?,
            ln2_bias: v("ln2.bias")?,
        })
    }

    fn run_blocks(
        &self,
        tape: &Tape,
        bound: &Bound,
        prefix: &str,
        mut x: Var,
        observed: &[ObservedVector],
        trace: &mut Option<&mut Trace>,
    ) -> Result<Var> {
        let layers = match prefix {
            "shared" => self.spec.encoder.shared_layers,
            _ => self.spec.encoder.layers,
        };
        let masks = BatchMask::new(observed);
        for l in 0..layers {
            let name = format!("{prefix}.block{l}");
            x = encoder_block(tape, x, &masks, &self.block_weights(bound, &name)?)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push((name, observed.to_vec(), x));
            }
        }
        Ok(x)
    }

    fn run_stack(
        &self,
        tape: &Tape,
        bound: &Bound,
        stack: &Stack,
        samples: &[Sample],
        trace: &mut Option<&mut Trace>,
    ) -> Result<(Var, Vec<ObservedVector>)> {
        let tokens = stack.tokens(samples)?;
        let x = embed(tape, bound.var(&format!("{}.emb", stack.prefix))?, &tokens)?;
        let x = self.run_blocks(tape, bound, &stack.prefix, x, &tokens.observed, trace)?;
        Ok((x, tokens.observed))
    }

    fn head(&self, tape: &Tape, bound: &Bound, member: usize, x: Var) -> Result<Var> {
        let head = self.spec.head_prefix(member);
        let flat = tape.flatten(x)?;
        let logits = tape.matmul(flat, bound.var(&format!("{head}.w"))?)?;
        tape.add(logits, bound.var(&format!("{head}.b"))?)
    }

    /// `[batch, C]` logits. `member` selects a late-fusion member and is
    /// ignored otherwise.
    fn logits_var(
        &self,
        tape: &Tape,
        bound: &Bound,
        samples: &[Sample],
        member: usize,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var> {
        self.check_samples(samples)?;
        let stacks = self.spec.stacks();
        match self.spec.fusion {
            FusionMode::Intermediate => {
                ensure_observed(samples)?;
                let mut parts = Vec::with_capacity(stacks.len());
                let mut observed: Vec<ObservedVector> = vec![ObservedVector::default(); samples.len()];
                for stack in &stacks {
                    let (x, obs) = self.run_stack(tape, bound, stack, samples, &mut trace)?;
                    parts.push(x);
                    for (acc, o) in observed.iter_mut().zip(&obs) {
                        *acc = acc.concat(o);
                    }
                }
                let r_sh = tape.concat(&parts, 1)?;
                let x = self.run_blocks(tape, bound, "shared", r_sh, &observed, &mut trace)?;
                self.head(tape, bound, 0, x)
            }
            FusionMode::Early => {
                ensure_observed(samples)?;
                let (x, _) = self.run_stack(tape, bound, &stacks[0], samples, &mut trace)?;
                self.head(tape, bound, 0, x)
            }
            FusionMode::Late => {
                let stack = stacks.get(member).ok_or_else(|| {
                    Error::InvalidArgument(format!("late-fusion member {member} does not exist"))
                })?;
                let (x, _) = self.run_stack(tape, bound, stack, samples, &mut trace)?;
                self.head(tape, bound, member, x)
            }
        }
    }

    fn logits_rows(&self, samples: &[Sample], member: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(INFERENCE_CHUNK) {
            let tape = Tape::new();
            let bound = self.params.bind(&tape, |_| false);
            let logits = tape.value(self.logits_var(&tape, &bound, chunk, member, None)?);
            let c = self.spec.n_classes();
            out.extend(logits.data().chunks(c).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Raw class scores of intermediate or early fusion.
    pub fn forward_logits(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        if self.spec.fusion == FusionMode::Late {
            return Err(Error::InvalidArgument(
                "late fusion produces averaged probabilities, not logits".into(),
            ));
        }
        self.logits_rows(samples, 0)
    }

    /// Logits of one late-fusion member over `samples`.
    pub fn member_logits(&self, member: usize, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        self.logits_rows(samples, member)
    }

    fn expect_mode(&self, mode: FusionMode) -> Result<()> {
        if self.spec.fusion == mode {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "model uses {} fusion, not {mode}",
                self.spec.fusion
            )))
        }
    }

    pub fn forward_intermediate(&self, sample: &Sample) -> Result<Vec<f64>> {
        self.expect_mode(FusionMode::Intermediate)?;
        Ok(self.logits_rows(std::slice::from_ref(sample), 0)?.remove(0))
    }

    pub fn forward_early(&self, sample: &Sample) -> Result<Vec<f64>> {
        self.expect_mode(FusionMode::Early)?;
        Ok(self.logits_rows(std::slice::from_ref(sample), 0)?.remove(0))
    }

    /// Mean class-probability vector over the members whose modality is
    /// present in `sample`.
    pub fn forward_late(&self, sample: &Sample) -> Result<Vec<f64>> {
        self.expect_mode(FusionMode::Late)?;
        Ok(self.predict_proba(std::slice::from_ref(sample))?.remove(0))
    }

    /// Class probabilities for any fusion mode.
    pub fn predict_proba(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        let c = self.spec.n_classes();
        if self.spec.fusion != FusionMode::Late {
            return Ok(self
                .forward_logits(samples)?
                .iter()
                .map(|row| {
                    let mut p = vec![0.0; c];
                    softmax_row(row, None, &mut p);
                    p
                })
                .collect());
        }
        self.check_samples(samples)?;
        let mut sums = vec![vec![0.0; c]; samples.len()];
        let mut counts = vec![0usize; samples.len()];
        for member in 0..self.member_count() {
            let idx: Vec<usize> = (0..samples.len())
                .filter(|&i| samples[i].modalities[member].is_present())
                .collect();
            if idx.is_empty() {
                continue;
            }
            let subset: Vec<Sample> = idx.iter().map(|&i| samples[i].clone()).collect();
            let logits = self.logits_rows(&subset, member)?;
            let mut p = vec![0.0; c];
            for (&i, row) in idx.iter().zip(&logits) {
                softmax_row(row, None, &mut p);
                sums[i].iter_mut().zip(&p).for_each(|(s, v)| *s += v);
                counts[i] += 1;
            }
        }
        if let Some(i) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Inference(format!("sample {i} has no observed modality")));
        }
        for (s, n) in sums.iter_mut().zip(counts) {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
        Ok(sums)
    }

    /// Loss of `member` on a batch, without gradients.
    pub fn loss(&self, samples: &[Sample], labels: &[usize], class_weights: Option<&[f64]>, member: usize) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, |_| false);
        let logits = self.logits_var(&tape, &bound, samples, member, None)?;
        let loss = tape.cross_entropy(logits, labels, class_weights)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Cross-entropy of `member` on a batch and its gradient with respect to
    /// every parameter of that member.
    pub fn loss_and_grads(
        &self,
        samples: &[Sample],
        labels: &[usize],
        class_weights: Option<&[f64]>,
        member: usize,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let tape = Tape::new();
        let prefix = self.member_prefix(member);
        let bound = self
            .params
            .bind(&tape, |name| prefix.as_deref().is_none_or(|p| name.starts_with(p)));
        let logits = self.logits_var(&tape, &bound, samples, member, None)?;
        let loss = tape.cross_entropy(logits, labels, class_weights)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &var) in bound.iter() {
            if let Some(g) = grads.take(var) {
                out.insert(name.clone(), g);
            }
        }
        Ok((value, out))
    }

    /// Outputs of every encoder block on `samples`, in execution order. For
    /// late fusion all members run on every sample.
    pub fn block_outputs(&self, samples: &[Sample]) -> Result<Vec<BlockTrace>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, |_| false);
        let mut trace = Trace::new();
        for member in 0..self.member_count() {
            self.logits_var(&tape, &bound, samples, member, Some(&mut trace))?;
        }
        Ok(trace
            .into_iter()
            .map(|(name, observed, var)| BlockTrace {
                name,
                observed,
                value: tape.value(var),
            })
            .collect())
    }
}

fn ensure_observed(samples: &[Sample]) -> Result<()> {
    match samples.iter().position(|s| s.observed_count() == 0) {
        Some(i) => Err(Error::Inference(format!("sample {i} has no observed feature"))),
        None => Ok(()),
    }
}

fn init_block(params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &EncoderConfig) {
    let (d, dh, ff) = (cfg.d_e, cfg.head_dim(), cfg.ff_width);
    for kind in ["q", "k", "v"] {
        for h in 0..cfg.heads {
            params.insert(format!("{prefix}.attn.{kind}{h}"), params::glorot(rng, d, dh));
        }
    }
    params.insert(format!("{prefix}.attn.o"), params::glorot(rng, d, d));
    params.insert(format!("{prefix}.ln1.gain"), Tensor::filled(&[d], 1.0));
    params.insert(format!("{prefix}.ln1.bias"), Tensor::zeros(&[d]));
    params.insert(format!("{prefix}.ff1.w"), params::glorot(rng, d, ff));
    params.insert(format!("{prefix}.ff1.b"), Tensor::zeros(&[ff]));
    params.insert(format!("{prefix}.ff2.w"), params::glorot(rng, ff, d));
    params.insert(format!("{prefix}.ff2.b"), Tensor::zeros(&[d]));
    params.insert(format!("{prefix}.ln2.gain"), Tensor::filled(&[d], 1.0));
    params.insert(format!("{prefix}.ln2.bias"), Tensor::zeros(&[d]));
}
