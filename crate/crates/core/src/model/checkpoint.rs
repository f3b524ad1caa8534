use std::path::Path;

use serde_json::json;

use super::{ModelConfig, SsmVae};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::world::Standardizer;

pub const MODEL_KIND: &str = "model";

impl SsmVae {
    /// Self-describing checkpoint: the header carries the model config and
    /// standardizer, the arrays are prefixed with `model.`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "kind": MODEL_KIND,
            "config": self.config,
            "standardizer": self.standardizer,
        }));
        ck.push_store("model.", &self.store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<SsmVae> {
        let bad = |d: String| Error::format(path, d);
        if ck.meta.get("kind").and_then(|v| v.as_str()) != Some(MODEL_KIND) {
            return Err(bad("not a model checkpoint".into()));
        }
        let config: ModelConfig =
            serde_json::from_value(ck.meta["config"].clone()).map_err(|e| bad(format!("model config: {e}")))?;
        let standardizer: Standardizer = serde_json::from_value(ck.meta["standardizer"].clone())
            .map_err(|e| bad(format!("standardizer: {e}")))?;
        let mut model = SsmVae::new(config)?;
        ck.load_into("model.", &mut model.store)
            .map_err(|e| bad(e.to_string()))?;
        model.standardizer = standardizer;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<SsmVae> {
        SsmVae::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}
