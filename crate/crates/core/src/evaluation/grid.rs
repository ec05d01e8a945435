use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{argmax, auc, knn_impute, mcc, Metric, MetricResult, DEFAULT_K};
use crate::data::{fit_preprocessor, stratified_splits, FoldSplit, MultimodalDataset};
use crate::error::{Error, Result};
use crate::masking::{inject_mcar, missing_rate, MissingnessPlan, Scenario, Scope};
use crate::model::{EncoderConfig, FusionMode, MariaModel, ModelSpec};
use crate::training::{train, TrainConfig};

/// A requested missing rate: the dataset's own rate Ω or an explicit fraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rate {
    Omega,
    Value(f64),
}

impl Rate {
    /// The rate actually applied: never below Ω.
    pub fn effective(self, omega: f64) -> f64 {
        match self {
            Rate::Omega => omega,
            Rate::Value(v) => v.max(omega),
        }
    }

    /// Column label: `Ω` or a percentage such as `5%`.
    pub fn label(self) -> String {
        match self {
            Rate::Omega => "Ω".into(),
            Rate::Value(v) => format!("{}%", trim_float(v * 100.0)),
        }
    }

    /// Parses `omega`, `Ω`, a fraction such as `0.05`, or a percentage such as `5%`.
    pub fn parse(s: &str) -> std::result::Result<Rate, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("omega") || s == "Ω" {
            return Ok(Rate::Omega);
        }
        let v = match s.strip_suffix('%') {
            Some(p) => p.trim().parse::<f64>().map(|v| v / 100.0),
            None => s.parse::<f64>(),
        }
        .map_err(|_| format!("invalid missing rate `{s}`"))?;
        Rate::value(v)
    }

    pub fn value(v: f64) -> std::result::Result<Rate, String> {
        if (0.0..1.0).contains(&v) {
            Ok(Rate::Value(v))
        } else {
            Err(format!("missing rate {v} outside [0, 1)"))
        }
    }
}

fn trim_float(v: f64) -> String {
    let s = format!("{:.4}", (v * 1e4).round() / 1e4);
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Rate::Omega => s.serialize_str("omega"),
            Rate::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Rate::value(v),
            Raw::Text(t) => Rate::parse(&t),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputer {
    /// Missing cells go to the model as they are.
    None,
    /// Missing cells are filled by k-nearest-neighbour imputation first.
    Knn,
}

impl Imputer {
    /// Row label in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Imputer::None => "without",
            Imputer::Knn => "with",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub train_rates: Vec<Rate>,
    pub test_rates: Vec<Rate>,
    pub scenarios: Vec<Scenario>,
    pub fusions: Vec<FusionMode>,
    pub imputers: Vec<Imputer>,
    pub folds: usize,
    pub val_fraction: f64,
    pub knn_k: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        let rates = vec![
            Rate::Omega,
            Rate::Value(0.05),
            Rate::Value(0.10),
            Rate::Value(0.30),
            Rate::Value(0.50),
            Rate::Value(0.75),
        ];
        GridSpec {
            train_rates: rates.clone(),
            test_rates: rates,
            scenarios: Scenario::ALL.to_vec(),
            fusions: FusionMode::ALL.to_vec(),
            imputers: vec![Imputer::None],
            folds: 5,
            val_fraction: 0.2,
            knn_k: DEFAULT_K,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let nonempty = [
            ("grid.train_rates", self.train_rates.is_empty()),
            ("grid.test_rates", self.test_rates.is_empty()),
            ("grid.scenarios", self.scenarios.is_empty()),
            ("grid.fusions", self.fusions.is_empty()),
            ("grid.imputers", self.imputers.is_empty()),
        ];
        if let Some((field, _)) = nonempty.iter().find(|(_, empty)| *empty) {
            return Err(Error::config(*field, "must not be empty"));
        }
        if self.folds < 2 {
            return Err(Error::config("grid.folds", "need at least 2 folds"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("grid.val_fraction", "must lie in [0, 1)"));
        }
        if self.knn_k == 0 {
            return Err(Error::config("grid.knn_k", "must be positive"));
        }
        Ok(())
    }
}

/// Result of one (cell, fold) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub scenario: Scenario,
    pub fusion: FusionMode,
    pub model: String,
    pub imputer: Imputer,
    pub train_rate: Rate,
    pub test_rate: Rate,
    pub effective_train_rate: f64,
    pub effective_test_rate: f64,
    pub fold: usize,
    pub auc: Option<f64>,
    pub mcc: Option<f64>,
    #[serde(default)]
    pub mcc_degenerate: bool,
    /// Reason the cell could not be evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl GridRecord {
    pub fn metric(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Auc => self.auc,
            Metric::Mcc => self.mcc,
        }
    }
}

/// All fold records of a grid run plus the pre-existing rate per scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub spec: GridSpec,
    pub omega: BTreeMap<Scenario, f64>,
    pub records: Vec<GridRecord>,
}

/// Identifies one cell of the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellKey {
    pub scenario: Scenario,
    pub fusion: FusionMode,
    pub imputer: Imputer,
    pub train_rate: Rate,
    pub test_rate: Rate,
}

impl ExperimentGrid {
    /// Fold-mean of `metric` for a cell; `None` when the cell was skipped or
    /// any fold left the metric undefined.
    pub fn cell(&self, key: CellKey, metric: Metric) -> Option<MetricResult> {
        cell_result(&self.records, key, metric)
    }

    pub fn write_records(&self, path: impl AsRef<Path>) -> Result<()> {
        write_records(&self.records, path)
    }
}

pub fn cell_result(records: &[GridRecord], key: CellKey, metric: Metric) -> Option<MetricResult> {
    let folds: Vec<&GridRecord> = records
        .iter()
        .filter(|r| {
            r.scenario == key.scenario
                && r.fusion == key.fusion
                && r.imputer == key.imputer
                && r.train_rate == key.train_rate
                && r.test_rate == key.test_rate
        })
        .collect();
    if folds.is_empty() || folds.iter().any(|r| r.skipped.is_some()) {
        return None;
    }
    let values: Option<Vec<f64>> = folds.iter().map(|r| r.metric(metric)).collect();
    values.map(|v| MetricResult::from_folds(metric, v))
}

/// One record per line as JSON.
pub fn write_records(records: &[GridRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<GridRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a sub-task, derived from the master seed and a tag path.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(master), |acc, &t| mix(acc ^ mix(t)))
}

const TAG_SPLIT: u64 = 1;
const TAG_TRAIN_MASK: u64 = 2;
const TAG_TEST_MASK: u64 = 3;
const TAG_MODEL: u64 = 4;

fn rate_tag(rate: f64) -> u64 {
    rate.to_bits()
}

/// One trained model: evaluated at every distinct effective test rate.
struct Job {
    scenario: Scenario,
    fusion: FusionMode,
    imputer: Imputer,
    train_rate: f64,
    fold: usize,
}

/// `(auc, mcc, mcc_degenerate)` of one scored test set, or why it was skipped.
type Scored = std::result::Result<(Option<f64>, Option<f64>, bool), String>;

struct JobResult {
    /// effective test rate -> (auc, mcc, degenerate) or skip reason
    by_test_rate: Vec<(f64, Scored)>,
}

/// Runs the full missing-rate protocol on `ds`.
///
/// For every scenario, fusion mode, imputer and train rate, each fold trains
/// one model on the train+val part (masked at the train rate) and scores it
/// on the test part masked at each test rate. Requested rates at or below
/// the dataset's own rate Ω reuse the Ω cell, which adds no missingness.
/// Every random choice is seeded from `master_seed`, and results do not
/// depend on `workers`.
pub fn run_grid(
    ds: &MultimodalDataset,
    spec: &GridSpec,
    encoder: &EncoderConfig,
    train_cfg: &TrainConfig,
    master_seed: u64,
    workers: Option<usize>,
) -> Result<ExperimentGrid> {
    spec.validate()?;
    encoder.validate()?;
    train_cfg.validate()?;
    let splits = stratified_splits(ds, spec.folds, spec.val_fraction, derive_seed(master_seed, &[TAG_SPLIT]))?;
    let omega: BTreeMap<Scenario, f64> = spec.scenarios.iter().map(|&s| (s, missing_rate(ds, s))).collect();

    let distinct = |rates: &[Rate], om: f64| -> Vec<f64> {
        let mut v: Vec<f64> = rates.iter().map(|r| r.effective(om)).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };

    let mut jobs = Vec::new();
    for &scenario in &spec.scenarios {
        for &fusion in &spec.fusions {
            for &imputer in &spec.imputers {
                for train_rate in distinct(&spec.train_rates, omega[&scenario]) {
                    for fold in 0..spec.folds {
                        jobs.push(Job {
                            scenario,
                            fusion,
                            imputer,
                            train_rate,
                            fold,
                        });
                    }
                }
            }
        }
    }
    info!("grid: {} training runs", jobs.len());

    let ctx = Ctx {
        ds,
        spec,
        encoder,
        train_cfg,
        master_seed,
        splits: &splits,
        omega: &omega,
    };
    let run_all = || -> Result<Vec<JobResult>> {
        jobs.par_iter()
            .map(|job| {
                let test_rates = distinct(&spec.test_rates, omega[&job.scenario]);
                ctx.run_job(job, &test_rates)
            })
            .collect()
    };
    let results = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?
            .install(run_all)?,
        None => run_all()?,
    };

    let mut records = Vec::new();
    for (job, res) in jobs.iter().zip(&results) {
        let om = omega[&job.scenario];
        for &train_rate in spec.train_rates.iter().filter(|r| r.effective(om) == job.train_rate) {
            for &test_rate in &spec.test_rates {
                let eff = test_rate.effective(om);
                let (_, outcome) = res
                    .by_test_rate
                    .iter()
                    .find(|(r, _)| *r == eff)
                    .expect("every distinct test rate is scored");
                let (auc, mcc, degenerate, skipped) = match outcome {
                    Ok((a, m, d)) => (*a, *m, *d, None),
                    Err(reason) => (None, None, false, Some(reason.clone())),
                };
                records.push(GridRecord {
                    scenario: job.scenario,
                    fusion: job.fusion,
                    model: job.fusion.model_name().into(),
                    imputer: job.imputer,
                    train_rate,
                    test_rate,
                    effective_train_rate: job.train_rate,
                    effective_test_rate: eff,
                    fold: job.fold,
                    auc,
                    mcc,
                    mcc_degenerate: degenerate,
                    skipped,
                });
            }
        }
    }
    records.sort_by(|a, b| {
        let key = |r: &GridRecord| {
            (
                spec.scenarios.iter().position(|&s| s == r.scenario),
                spec.fusions.iter().position(|&f| f == r.fusion),
                spec.imputers.iter().position(|&i| i == r.imputer),
                spec.train_rates.iter().position(|&t| t == r.train_rate),
                spec.test_rates.iter().position(|&t| t == r.test_rate),
                r.fold,
            )
        };
        key(a).cmp(&key(b))
    });
    Ok(ExperimentGrid {
        spec: spec.clone(),
        omega,
        records,
    })
}

struct Ctx<'a> {
    ds: &'a MultimodalDataset,
    spec: &'a GridSpec,
    encoder: &'a EncoderConfig,
    train_cfg: &'a TrainConfig,
    master_seed: u64,
    splits: &'a [FoldSplit],
    omega: &'a BTreeMap<Scenario, f64>,
}

impl Ctx<'_> {
    /// Masks `part` at `rate`, or returns it untouched when `rate` is Ω.
    fn mask(&self, part: &MultimodalDataset, scenario: Scenario, rate: f64, scope: Scope, seed: u64) -> Result<MultimodalDataset> {
        if rate <= self.omega[&scenario] {
            return Ok(part.clone());
        }
        inject_mcar(
            part,
            &MissingnessPlan {
                scenario,
                rate,
                seed,
                scope,
            },
        )
    }

    fn run_job(&self, job: &Job, test_rates: &[f64]) -> Result<JobResult> {
        let split = &self.splits[job.fold];
        let scen_tag = job.scenario as u64;
        let fold_tag = job.fold as u64;
        let skip_all = |reason: String| JobResult {
            by_test_rate: test_rates.iter().map(|&r| (r, Err(reason.clone()))).collect(),
        };

        // train+val rows first (train, then val), test rows after
        let tv_idx: Vec<usize> = split.train.iter().chain(&split.val).copied().collect();
        let n_train = split.train.len();
        let n_tv = tv_idx.len();
        let train_seed = derive_seed(
            self.master_seed,
            &[TAG_TRAIN_MASK, scen_tag, rate_tag(job.train_rate), fold_tag],
        );
        let tv = match self.mask(&self.ds.subset(&tv_idx), job.scenario, job.train_rate, Scope::Train, train_seed) {
            Ok(d) => d,
            Err(Error::Infeasible(msg)) => {
                warn!("train injection skipped: {msg}");
                return Ok(skip_all(msg));
            }
            Err(e) => return Err(e),
        };

        let train_pos: Vec<usize> = (0..n_train).collect();
        let prepare = |combined: &MultimodalDataset| -> Result<MultimodalDataset> {
            let filled = match job.imputer {
                Imputer::None => combined.clone(),
                Imputer::Knn => knn_impute(combined, &train_pos, self.spec.knn_k)?,
            };
            fit_preprocessor(&filled, &train_pos)?.apply_all(&filled)
        };

        let prepared_tv = prepare(&tv)?;
        let nonempty = |d: &MultimodalDataset, range: std::ops::Range<usize>| -> Vec<usize> {
            range.filter(|&i| d.observed_count(i) > 0).collect()
        };
        let local = FoldSplit {
            train: nonempty(&prepared_tv, 0..n_train),
            val: nonempty(&prepared_tv, n_train..n_tv),
            test: Vec::new(),
        };
        let model_seed = derive_seed(
            self.master_seed,
            &[
                TAG_MODEL,
                scen_tag,
                job.fusion as u64,
                job.imputer as u64,
                rate_tag(job.train_rate),
                fold_tag,
            ],
        );
        let model = MariaModel::new(
            ModelSpec::for_dataset(self.ds, self.encoder.clone(), job.fusion),
            model_seed,
        )?;
        let cfg = TrainConfig {
            seed: model_seed,
            ..self.train_cfg.clone()
        };
        let model = match train(model, &prepared_tv, &local, &cfg) {
            Ok((m, _)) => m,
            Err(Error::Divergence { epoch, detail }) => {
                return Ok(skip_all(format!("training diverged at epoch {epoch}: {detail}")));
            }
            Err(e) => return Err(e),
        };

        let test_part = self.ds.subset(&split.test);
        let mut by_test_rate = Vec::with_capacity(test_rates.len());
        for &rate in test_rates {
            let seed = derive_seed(self.master_seed, &[TAG_TEST_MASK, scen_tag, rate_tag(rate), fold_tag]);
            let masked = match self.mask(&test_part, job.scenario, rate, Scope::Test, seed) {
                Ok(d) => d,
                Err(Error::Infeasible(msg)) => {
                    by_test_rate.push((rate, Err(msg)));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let combined = tv.stack(&masked)?;
            let prepared = prepare(&combined)?;
            let test_rows = nonempty(&prepared, n_tv..combined.n_samples());
            let samples = prepared.samples(&test_rows);
            let labels: Vec<usize> = test_rows.iter().map(|&i| prepared.labels[i]).collect();
            let probs = model.predict_proba(&samples)?;
            let auc_v = match auc(&probs, &labels) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
            let (mcc_v, degenerate) = match mcc(&pred, &labels) {
                Ok(m) => (Some(m.value), m.degenerate),
                Err(Error::UndefinedMetric(_)) => (None, false),
                Err(e) => return Err(e),
            };
            by_test_rate.push((rate, Ok((auc_v, mcc_v, degenerate))));
        }
        Ok(JobResult { by_test_rate })
    }
}
