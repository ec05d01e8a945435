use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use maria::masking::Scenario;
use maria::model::FusionMode;
use maria_cli::{
    cmd_eval, cmd_grid, cmd_report, cmd_synth, cmd_train, exit_code, GridOptions, MetricChoice, Overrides, RunConfig,
    TestMasking,
};

#[derive(Parser)]
#[command(name = "maria", version, about = "Masked-attention transformer for incomplete multimodal tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Auc,
    Mcc,
    Both,
}

impl From<MetricArg> for MetricChoice {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Auc => MetricChoice::Auc,
            MetricArg::Mcc => MetricChoice::Mcc,
            MetricArg::Both => MetricChoice::Both,
        }
    }
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (CSVs, schema and manifest).
    Synth {
        /// Synthesis spec (TOML); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on the first fold and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_fusion)]
        fusion: Option<FusionMode>,
    },
    /// Score a checkpoint on the test part of its fold.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `checkpoint.json` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Inject extra missingness into the test part first.
        #[arg(long, value_parser = parse_scenario, requires = "rate")]
        scenario: Option<Scenario>,
        #[arg(long, requires = "scenario")]
        rate: Option<f64>,
    },
    /// Run the missing-rate grid and emit result tables.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Worker threads; all cores when omitted.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, value_enum, default_value = "both")]
        metric: MetricArg,
        /// Restrict the grid to one scenario.
        #[arg(long, value_parser = parse_scenario)]
        scenario: Option<Scenario>,
        /// Restrict the grid to one fusion mode.
        #[arg(long, value_parser = parse_fusion)]
        fusion: Option<FusionMode>,
    },
    /// Rebuild result tables from a grid records file.
    Report {
        records: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        metric: MetricArg,
        #[arg(long, value_parser = parse_scenario)]
        scenario: Option<Scenario>,
        /// Also write the tables (text and CSV) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    s.parse()
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse()
}

fn run(cli: Cli) -> maria::Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let manifest = cmd_synth(config.as_deref(), &out, seed)?;
            println!("{}", manifest.display());
        }
        Command::Train { common, fusion } => {
            let loaded = RunConfig::load(&common.config)?;
            let ov = Overrides {
                seed: common.seed,
                out: common.out,
                fusion,
            };
            let res = cmd_train(&loaded, &ov)?;
            for m in &res.report.members {
                let best = &m.epochs[m.best_epoch - 1];
                let auc = best.val_auc.map_or("n/a".into(), |a| format!("{a:.4}"));
                println!(
                    "member {}: best epoch {} of {}, val loss {:.4}, val AUC {auc}",
                    m.member,
                    m.best_epoch,
                    m.epochs.len(),
                    best.val_loss
                );
            }
            println!("checkpoint: {}", res.checkpoint.display());
        }
        Command::Eval {
            common,
            checkpoint,
            scenario,
            rate,
        } => {
            let loaded = RunConfig::load(&common.config)?;
            let ov = Overrides {
                seed: common.seed,
                out: common.out,
                fusion: None,
            };
            let checkpoint = checkpoint.unwrap_or_else(|| {
                ov.out.clone().unwrap_or_else(|| loaded.config.output.clone()).join("checkpoint.json")
            });
            let masking = scenario.zip(rate).map(|(scenario, rate)| TestMasking { scenario, rate });
            let res = cmd_eval(&loaded, &checkpoint, &ov, masking)?;
            let show = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{v:.4}"));
            println!("samples {}  AUC {}  MCC {}", res.samples, show(res.auc), show(res.mcc));
        }
        Command::Grid {
            common,
            workers,
            metric,
            scenario,
            fusion,
        } => {
            let loaded = RunConfig::load(&common.config)?;
            let opts = GridOptions {
                overrides: Overrides {
                    seed: common.seed,
                    out: common.out,
                    fusion,
                },
                workers,
                metric: metric.into(),
                scenario,
            };
            let res = cmd_grid(&loaded, &opts)?;
            for t in &res.tables {
                println!("{}", t.render_text());
            }
            println!("records: {}", res.records.display());
        }
        Command::Report {
            records,
            metric,
            scenario,
            out,
        } => {
            for t in cmd_report(&records, metric.into(), scenario, out.as_deref())? {
                println!("{}", t.render_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
