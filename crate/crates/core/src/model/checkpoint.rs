use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MariaModel;
use crate::data::Preprocessor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model with the preprocessing it expects, stored as JSON.
/// Floats are written in shortest round-trip form, so loading restores
/// every parameter bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: MariaModel,
    #[serde(default)]
    pub preprocessor: Option<Preprocessor>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: MariaModel, preprocessor: Option<Preprocessor>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model,
            preprocessor,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::InvalidArgument(format!("cannot serialize checkpoint: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {}", ck.version),
            ));
        }
        let model = MariaModel::from_parts(ck.model.spec.clone(), ck.model.params.clone())
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Checkpoint { model, ..ck })
    }
}
