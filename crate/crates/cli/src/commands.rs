use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use maria::data::{fit_preprocessor, stratified_splits, synthesize_dataset, write_dataset, FoldSplit, SynthSpec};
use maria::evaluation::{argmax, auc, derive_seed, mcc, read_records, run_grid, Metric};
use maria::masking::{inject_mcar, MissingnessPlan, Scenario, Scope};
use maria::model::{Checkpoint, FusionMode, MariaModel, ModelSpec};
use maria::report::{tables_from_records, ReportTable};
use maria::training::{train, TrainConfig, TrainReport};
use maria::{Error, Result};
use serde::Serialize;

use crate::config::{LoadedConfig, RunConfig};

const SEED_SPLIT: u64 = 1;
const SEED_MODEL: u64 = 4;
const SEED_TRAIN: u64 = 5;
const SEED_EVAL_MASK: u64 = 6;

/// Which metrics a command reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MetricChoice {
    Auc,
    Mcc,
    #[default]
    Both,
}

impl MetricChoice {
    pub fn metrics(self) -> Vec<Metric> {
        match self {
            MetricChoice::Auc => vec![Metric::Auc],
            MetricChoice::Mcc => vec![Metric::Mcc],
            MetricChoice::Both => Metric::ALL.to_vec(),
        }
    }
}

/// Command-line overrides shared by the config-driven commands.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub fusion: Option<FusionMode>,
}

/// Resolved settings recorded next to every output.
#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub command: String,
    pub version: String,
    pub config_path: PathBuf,
    pub config_sha256: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl Provenance {
    fn new(command: &str, loaded: &LoadedConfig, config: &RunConfig) -> Self {
        Provenance {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_path: loaded.path.clone(),
            config_sha256: loaded.sha256.clone(),
            seed: config.seed,
            config: config.clone(),
        }
    }
}

fn resolve(loaded: &LoadedConfig, ov: &Overrides) -> RunConfig {
    let mut c = loaded.config.clone();
    if let Some(s) = ov.seed {
        c.seed = s;
    }
    if let Some(o) = &ov.out {
        c.output = o.clone();
    }
    if let Some(f) = ov.fusion {
        c.fusion = f.as_str().into();
    }
    c
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

/// Writes a synthetic dataset to `out` and returns its manifest path.
pub fn cmd_synth(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<PathBuf> {
    let mut spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| Error::config("<synth spec>", e.message()))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let ds = synthesize_dataset(&spec)?;
    let manifest = write_dataset(&ds, out)?;
    info!("wrote {} samples to {}", ds.n_samples(), out.display());
    Ok(manifest)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub report_path: PathBuf,
    pub report: TrainReport,
}

#[derive(Serialize)]
struct TrainReportFile<'a> {
    provenance: &'a Provenance,
    fold: usize,
    train: &'a TrainReport,
}

fn split_for(config: &RunConfig, ds: &maria::data::MultimodalDataset) -> Result<FoldSplit> {
    let splits = stratified_splits(
        ds,
        config.grid.folds,
        config.grid.val_fraction,
        derive_seed(config.seed, &[SEED_SPLIT]),
    )?;
    Ok(splits.into_iter().next().expect("at least two folds"))
}

/// Trains one model on the first cross-validation fold and writes
/// `checkpoint.json` and `train_report.json`.
pub fn cmd_train(loaded: &LoadedConfig, ov: &Overrides) -> Result<TrainOutput> {
    let config = resolve(loaded, ov);
    config.validate()?;
    let fusion = config.fusion_mode()?;
    let ds = config.load_dataset()?;
    let split = split_for(&config, &ds)?;

    let pre = fit_preprocessor(&ds, &split.train)?;
    let prepared = pre.apply_all(&ds)?;
    let keep = |idx: &[usize]| idx.iter().copied().filter(|&i| prepared.observed_count(i) > 0).collect();
    let local = FoldSplit {
        train: keep(&split.train),
        val: keep(&split.val),
        test: Vec::new(),
    };
    let model = MariaModel::new(
        ModelSpec::for_dataset(&ds, config.model.clone(), fusion),
        derive_seed(config.seed, &[SEED_MODEL]),
    )?;
    let cfg = TrainConfig {
        seed: derive_seed(config.seed, &[SEED_TRAIN, config.train.seed]),
        ..config.train.clone()
    };
    let (model, report) = train(model, &prepared, &local, &cfg)?;

    let prov = Provenance::new("train", loaded, &config);
    let mut ck = Checkpoint::new(model, Some(pre));
    ck.metadata = BTreeMap::from([
        ("config_sha256".into(), prov.config_sha256.clone()),
        ("seed".into(), config.seed.to_string()),
        ("fold".into(), "0".into()),
        ("config".into(), config.to_toml()),
    ]);
    create_dir(&config.output)?;
    let checkpoint = config.output.join("checkpoint.json");
    ck.save(&checkpoint)?;
    let report_path = config.output.join("train_report.json");
    write(
        &report_path,
        to_json(&TrainReportFile {
            provenance: &prov,
            fold: 0,
            train: &report,
        }),
    )?;
    Ok(TrainOutput {
        checkpoint,
        report_path,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalOutput {
    pub samples: usize,
    pub auc: Option<f64>,
    pub mcc: Option<f64>,
    pub mcc_degenerate: bool,
    pub scenario: Option<Scenario>,
    pub rate: Option<f64>,
}

/// Optional extra missingness applied to the test fold before scoring.
#[derive(Clone, Copy, Debug)]
pub struct TestMasking {
    pub scenario: Scenario,
    pub rate: f64,
}

/// Scores a checkpoint on the test part of the fold it was trained on and
/// writes `eval.json`.
pub fn cmd_eval(
    loaded: &LoadedConfig,
    checkpoint: &Path,
    ov: &Overrides,
    masking: Option<TestMasking>,
) -> Result<EvalOutput> {
    let mut config = resolve(loaded, ov);
    config.validate()?;
    if let Some(m) = masking {
        MissingnessPlan {
            scenario: m.scenario,
            rate: m.rate,
            seed: 0,
            scope: Scope::Test,
        }
        .validate()
        .map_err(|e| Error::config("rate", e.to_string()))?;
    }
    let ck = Checkpoint::load(checkpoint)?;
    // the split must be the one the checkpoint was trained on
    if let (None, Some(s)) = (ov.seed, ck.metadata.get("seed")) {
        config.seed = s
            .parse()
            .map_err(|_| Error::format(checkpoint, format!("bad seed `{s}` in metadata")))?;
    }
    let ds = config.load_dataset()?;
    let split = split_for(&config, &ds)?;
    let mut test = ds.subset(&split.test);
    if let Some(m) = masking {
        test = inject_mcar(
            &test,
            &MissingnessPlan {
                scenario: m.scenario,
                rate: m.rate,
                seed: derive_seed(config.seed, &[SEED_EVAL_MASK]),
                scope: Scope::Test,
            },
        )?;
    }
    let prepared = match &ck.preprocessor {
        Some(p) => p.apply_all(&test)?,
        None => test,
    };
    let rows: Vec<usize> = (0..prepared.n_samples())
        .filter(|&i| prepared.observed_count(i) > 0)
        .collect();
    let probs = ck.model.predict_proba(&prepared.samples(&rows))?;
    let labels: Vec<usize> = rows.iter().map(|&i| prepared.labels[i]).collect();
    let auc_v = match auc(&probs, &labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let m = mcc(&pred, &labels).ok();
    let out = EvalOutput {
        samples: rows.len(),
        auc: auc_v,
        mcc: m.map(|m| m.value),
        mcc_degenerate: m.is_some_and(|m| m.degenerate),
        scenario: masking.map(|m| m.scenario),
        rate: masking.map(|m| m.rate),
    };

    #[derive(Serialize)]
    struct EvalFile<'a> {
        provenance: Provenance,
        checkpoint: &'a Path,
        result: &'a EvalOutput,
    }
    create_dir(&config.output)?;
    write(
        &config.output.join("eval.json"),
        to_json(&EvalFile {
            provenance: Provenance::new("eval", loaded, &config),
            checkpoint,
            result: &out,
        }),
    )?;
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct GridOptions {
    pub overrides: Overrides,
    pub workers: Option<usize>,
    pub metric: MetricChoice,
    pub scenario: Option<Scenario>,
}

#[derive(Clone, Debug)]
pub struct GridOutput {
    pub records: PathBuf,
    pub tables: Vec<ReportTable>,
    pub table_files: Vec<PathBuf>,
}

/// Runs the experiment grid and writes `records.jsonl`, `run.json` and one
/// text and one CSV file per (scenario, metric) table.
pub fn cmd_grid(loaded: &LoadedConfig, opts: &GridOptions) -> Result<GridOutput> {
    let mut config = resolve(loaded, &opts.overrides);
    if let Some(f) = opts.overrides.fusion {
        config.grid.fusions = vec![f];
    }
    if let Some(s) = opts.scenario {
        config.grid.scenarios = vec![s];
    }
    config.validate()?;
    let ds = config.load_dataset()?;
    let grid = run_grid(&ds, &config.grid, &config.model, &config.train, config.seed, opts.workers)?;
    let tables = tables_from_records(&grid.records, &opts.metric.metrics())?;

    let prov = Provenance::new("grid", loaded, &config);
    let out = &config.output;
    create_dir(out)?;
    let records = out.join("records.jsonl");
    grid.write_records(&records)?;

    #[derive(Serialize)]
    struct RunFile<'a> {
        provenance: &'a Provenance,
        omega: BTreeMap<String, f64>,
    }
    write(
        &out.join("run.json"),
        to_json(&RunFile {
            provenance: &prov,
            omega: grid.omega.iter().map(|(s, v)| (s.to_string(), *v)).collect(),
        }),
    )?;
    let header = format!("# seed {} config sha256 {}\n", config.seed, prov.config_sha256);
    let table_files = write_tables(&tables, out, &header)?;
    Ok(GridOutput {
        records,
        tables,
        table_files,
    })
}

fn table_stem(t: &ReportTable) -> String {
    // titles look like "AUC (missing_modalities)"
    let scenario = t
        .title
        .split_once('(')
        .map(|(_, r)| r.trim_end_matches(')'))
        .unwrap_or("table");
    format!("{scenario}_{}", t.metric.as_str())
}

fn write_tables(tables: &[ReportTable], out: &Path, text_header: &str) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for t in tables {
        let stem = table_stem(t);
        let txt = out.join(format!("{stem}.txt"));
        write(&txt, format!("{text_header}{}", t.render_text()))?;
        let csv = out.join(format!("{stem}.csv"));
        write(&csv, t.render_csv())?;
        files.extend([txt, csv]);
    }
    Ok(files)
}

/// Rebuilds report tables from a records file, optionally writing them to `out`.
pub fn cmd_report(
    records: &Path,
    metric: MetricChoice,
    scenario: Option<Scenario>,
    out: Option<&Path>,
) -> Result<Vec<ReportTable>> {
    let mut all = read_records(records)?;
    if let Some(s) = scenario {
        all.retain(|r| r.scenario == s);
    }
    if all.is_empty() {
        return Err(Error::Data(format!("{} holds no matching records", records.display())));
    }
    let tables = tables_from_records(&all, &metric.metrics())?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_tables(&tables, dir, "")?;
    }
    Ok(tables)
}

/// Process exit code for an error: 2 configuration, 4 infeasible
/// injection, 3 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::Infeasible(_) => 4,
        _ => 3,
    }
}
