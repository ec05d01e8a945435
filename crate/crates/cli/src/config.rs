use std::fs;
use std::path::{Path, PathBuf};

use maria::data::{load_dataset, synthesize_dataset, MultimodalDataset, SynthSpec};
use maria::evaluation::GridSpec;
use maria::model::{EncoderConfig, FusionMode};
use maria::training::TrainConfig;
use maria::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where the data comes from: exactly one of the two must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub manifest: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
}

/// Experiment configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed every other seed is derived from.
    pub seed: u64,
    pub output: PathBuf,
    /// Fusion mode used by `train` and `eval`.
    pub fusion: String,
    pub dataset: DatasetConfig,
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub grid: GridSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output: PathBuf::from("maria-out"),
            fusion: FusionMode::Intermediate.as_str().into(),
            dataset: DatasetConfig::default(),
            model: EncoderConfig::default(),
            train: TrainConfig::default(),
            grid: GridSpec::default(),
        }
    }
}

/// A parsed config plus the hash of the file it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub sha256: String,
    pub path: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

impl RunConfig {
    /// Reads and validates a TOML config. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<LoadedConfig> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| Error::config("<file>", "config is not UTF-8"))?;
        let mut config = RunConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(m) = &mut config.dataset.manifest {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
        if config.output.is_relative() {
            config.output = base.join(&config.output);
        }
        config.validate()?;
        Ok(LoadedConfig {
            config,
            sha256: sha256_hex(&bytes),
            path: path.to_path_buf(),
        })
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = e
                .span()
                .map(|s| key_at(text, s.start))
                .unwrap_or_else(|| "<file>".into());
            Error::config(field, msg)
        })
    }

    pub fn fusion_mode(&self) -> Result<FusionMode> {
        self.fusion.parse().map_err(|m: String| Error::config("fusion", m))
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion_mode()?;
        match (&self.dataset.manifest, &self.dataset.synth) {
            (Some(_), Some(_)) => {
                return Err(Error::config("dataset", "set either `manifest` or `synth`, not both"));
            }
            (None, None) => return Err(Error::config("dataset", "set `manifest` or `synth`")),
            (Some(m), None) if !m.is_file() => {
                return Err(Error::config("dataset.manifest", format!("{} does not exist", m.display())));
            }
            (None, Some(s)) => s.validate().map_err(|e| prefix("dataset.synth", e))?,
            _ => {}
        }
        self.model.validate().map_err(|e| prefix("model", e))?;
        self.train.validate()?;
        self.grid.validate()?;
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<MultimodalDataset> {
        match (&self.dataset.manifest, &self.dataset.synth) {
            (Some(m), _) => load_dataset(m),
            (None, Some(s)) => synthesize_dataset(s),
            (None, None) => Err(Error::config("dataset", "set `manifest` or `synth`")),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }
}

/// Qualifies the field of a config error with its table name.
fn prefix(table: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } if !field.starts_with(table) => {
            Error::config(format!("{table}.{field}"), message)
        }
        other => other,
    }
}

/// Dotted key of the assignment enclosing byte offset `at`.
fn key_at(text: &str, at: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if offset > at {
            break;
        }
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            table = name.trim_matches(['[', ']']).trim().to_string();
            key.clear();
        } else if let Some((k, _)) = t.split_once('=') {
            if !k.trim_start().starts_with('#') {
                key = k.trim().to_string();
            }
        }
        offset += line.len();
    }
    match (table.is_empty(), key.is_empty()) {
        (true, true) => "<file>".into(),
        (true, false) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}
