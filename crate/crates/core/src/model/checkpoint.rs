use std::path::Path;

use serde::{Deserialize, Serialize};
use xkt_autograd::ParamStore;

use super::{Model, ModelConfig};
use crate::data::Vocab;
use crate::error::{KtError, Result};

pub const CHECKPOINT_FORMAT: &str = "xkt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON container for a trained model.
///
/// `params` lists every tensor by name in the order the model creates them;
/// loading rebuilds the model from `model` and checks names and shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub vocab: Option<Vocab>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(model: &Model, config_hash: impl Into<String>, seed: u64, vocab: Option<Vocab>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            seed,
            model: model.config().clone(),
            vocab,
            params: model.store().clone(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.model, self.seed)?;
        let fresh = model.store();
        if fresh.len() != self.params.len() {
            return Err(KtError::contract(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                fresh.len()
            )));
        }
        for (a, b) in fresh.iter().zip(self.params.iter()) {
            if a.name != b.name {
                return Err(KtError::contract(format!(
                    "checkpoint tensor `{}` where `{}` was expected",
                    b.name, a.name
                )));
            }
        }
        model.store_mut().set_tensors(self.params.tensors())?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|source| KtError::Json {
            context: "serializing checkpoint".into(),
            source,
        })?;
        std::fs::write(path, text).map_err(|e| KtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KtError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|source| KtError::Json {
            context: format!("reading checkpoint {}", path.display()),
            source,
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(KtError::contract(format!(
                "{} is not a version {CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file",
                path.display()
            )));
        }
        Ok(ck)
    }
}
