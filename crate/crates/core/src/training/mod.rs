//! Mini-batch Adam training with missingness regularizers and early stopping.

mod adam;

use std::time::Instant;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FoldSplit, MultimodalDataset, Sample};
use crate::error::{Error, Result};
use crate::evaluation::auc;
use crate::masking::{feature_dropout, regularize};
use crate::model::{FusionMode, MariaModel};
use crate::numerics::softmax_row;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Apply modality and feature dropout to training batches.
    pub regularizers: bool,
    /// Probability that each dropout regularizer fires on a sample.
    pub apply_prob: f64,
    /// Weight the loss by inverse class frequency of the training split.
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 300,
            patience: 25,
            seed: 0,
            regularizers: true,
            apply_prob: 0.5,
            class_weighting: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::config("train.patience", "cannot exceed max_epochs"));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::config("train.apply_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation AUC, absent when the validation split holds a single class.
    pub val_auc: Option<f64>,
}

/// Training history of one independently optimized part of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub member: usize,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub members: Vec<MemberReport>,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// Report content without the timing, for reproducibility checks.
    pub fn history(&self) -> &[MemberReport] {
        &self.members
    }
}

/// Inverse-frequency weights `n / (C * n_c)`; classes absent from the
/// split get weight 0.
pub fn class_weights(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                labels.len() as f64 / (n_classes * c) as f64
            }
        })
        .collect()
}

/// Trains `model` on `split.train`, stopping early on `split.val` loss (on
/// training loss when the validation split is empty), and returns the model
/// holding the best parameters seen. `ds` is never modified; regularizers
/// act on per-batch copies and are redrawn for every batch.
pub fn train(
    mut model: MariaModel,
    ds: &MultimodalDataset,
    split: &FoldSplit,
    cfg: &TrainConfig,
) -> Result<(MariaModel, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    if let Some(&i) = split.train.iter().find(|&&i| ds.observed_count(i) == 0) {
        return Err(Error::Data(format!("training sample {i} has no observed feature")));
    }
    let train_labels: Vec<usize> = split.train.iter().map(|&i| ds.labels[i]).collect();
    let weights = cfg
        .class_weighting
        .then(|| class_weights(&train_labels, ds.n_classes()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut members = Vec::with_capacity(model.member_count());
    for member in 0..model.member_count() {
        let report = train_member(&mut model, ds, split, cfg, member, weights.as_deref(), &mut rng)?;
        members.push(report);
    }
    Ok((
        model,
        TrainReport {
            members,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

fn mean_loss(
    model: &MariaModel,
    samples: &[Sample],
    labels: &[usize],
    weights: Option<&[f64]>,
    member: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut norm = 0.0;
    for (s, l) in samples.chunks(256).zip(labels.chunks(256)) {
        let w: f64 = l.iter().map(|&c| weights.map_or(1.0, |w| w[c])).sum();
        if w > 0.0 {
            total += model.loss(s, l, weights, member)? * w;
            norm += w;
        }
    }
    Ok(if norm > 0.0 { total / norm } else { 0.0 })
}

fn member_auc(model: &MariaModel, samples: &[Sample], labels: &[usize], member: usize) -> Result<Option<f64>> {
    let probs: Vec<Vec<f64>> = if model.fusion() == FusionMode::Late {
        model
            .member_logits(member, samples)?
            .iter()
            .map(|row| {
                let mut p = vec![0.0; row.len()];
                softmax_row(row, None, &mut p);
                p
            })
            .collect()
    } else {
        model.predict_proba(samples)?
    };
    match auc(&probs, labels) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn train_member(
    model: &mut MariaModel,
    ds: &MultimodalDataset,
    split: &FoldSplit,
    cfg: &TrainConfig,
    member: usize,
    weights: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<MemberReport> {
    let late = model.fusion() == FusionMode::Late;
    let keep = |idx: &[usize]| -> Vec<usize> {
        idx.iter()
            .copied()
            .filter(|&i| model.member_accepts(member, &ds.sample(i)))
            .collect()
    };
    let mut train_idx = keep(&split.train);
    let val_idx = keep(&split.val);
    if train_idx.is_empty() {
        return Err(Error::Data(format!("no training sample available for member {member}")));
    }
    let val_samples = ds.samples(&val_idx);
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| ds.labels[i]).collect();

    let prefix = model.member_prefix(member);
    let mut state = AdamState::new();
    let mut best = (f64::INFINITY, 0usize, model.params().clone());
    let mut epochs = Vec::new();
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in train_idx.chunks(cfg.batch_size) {
            let mut samples = ds.samples(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| ds.labels[i]).collect();
            if cfg.regularizers {
                for s in &mut samples {
                    if late {
                        feature_dropout(&mut s.modalities[member], cfg.apply_prob, rng);
                    } else {
                        regularize(s, cfg.apply_prob, rng);
                    }
                }
            }
            let (loss, grads) = model.loss_and_grads(&samples, &labels, weights, member)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite training loss {loss}"),
                });
            }
            adam_step(model.params_mut(), &grads, &mut state, cfg.learning_rate);
            if !model.params().is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: "a parameter became non-finite".into(),
                });
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen as f64;
        let (val_loss, val_auc) = if val_idx.is_empty() {
            (train_loss, None)
        } else {
            (
                mean_loss(model, &val_samples, &val_labels, weights, member)?,
                member_auc(model, &val_samples, &val_labels, member)?,
            )
        };
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("non-finite validation loss {val_loss}"),
            });
        }
        debug!("member {member} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_auc,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, model.params().clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }

    let (_, best_epoch, params) = best;
    match prefix {
        // keep the other members' parameters as they are
        Some(p) => {
            let names: Vec<String> = params.names().filter(|n| n.starts_with(&p)).map(String::from).collect();
            for n in names {
                *model.params_mut().get_mut(&n).expect("same layout") = params.get(&n).expect("same layout").clone();
            }
        }
        None => *model.params_mut() = params,
    }
    Ok(MemberReport {
        member,
        epochs,
        best_epoch,
    })
}
