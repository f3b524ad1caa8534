use std::path::Path;

use serde_json::json;

use super::{EpochRecord, TrainState};
use crate::error::{Error, Result};
use crate::model::SsmVae;
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const TRAIN_STATE_KIND: &str = "train-state";

impl TrainState {
    /// Model checkpoint extended with optimizer moments, best parameters
    /// and the training history.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint();
        ck.meta["kind"] = json!(TRAIN_STATE_KIND);
        ck.meta["train"] = json!({
            "epoch": self.epoch,
            "history": self.history,
            "best_val": if self.best_val.is_finite() { json!(self.best_val) } else { json!(null) },
            "bad_epochs": self.bad_epochs,
            "adam_config": self.adam.config,
            "adam_t": self.adam.t,
        });
        ck.push_store("best.", &self.best);
        for (id, p) in self.model.store.iter() {
            let shape = p.value.shape().to_vec();
            ck.push(format!("adam.m.{}", p.name), &p.group, Tensor::new(shape.clone(), self.adam.m[id.index()].clone())?);
            ck.push(format!("adam.v.{}", p.name), &p.group, Tensor::new(shape, self.adam.v[id.index()].clone())?);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<TrainState> {
        let bad = |d: String| Error::format(path, d);
        if ck.meta.get("kind").and_then(|v| v.as_str()) != Some(TRAIN_STATE_KIND) {
            return Err(bad("not a training-state checkpoint".into()));
        }
        let mut as_model = ck.clone();
        as_model.meta["kind"] = json!(crate::model::MODEL_KIND);
        let model = SsmVae::from_checkpoint(&as_model, path)?;
        let tr = &ck.meta["train"];
        let field = |k: &str| tr.get(k).cloned().ok_or_else(|| bad(format!("missing train.{k}")));
        let parse = |e: serde_json::Error| bad(e.to_string());
        let history: Vec<EpochRecord> = serde_json::from_value(field("history")?).map_err(parse)?;
        let adam_config: AdamConfig = serde_json::from_value(field("adam_config")?).map_err(parse)?;
        let mut best = model.store.clone();
        ck.load_into("best.", &mut best).map_err(|e| bad(e.to_string()))?;
        let mut adam = Adam::new(&model.store, adam_config);
        adam.t = field("adam_t")?.as_u64().ok_or_else(|| bad("train.adam_t".into()))?;
        for (id, p) in model.store.iter() {
            for (prefix, slot) in [("m", &mut adam.m), ("v", &mut adam.v)] {
                let name = format!("adam.{prefix}.{}", p.name);
                let t = ck.get(&name).ok_or_else(|| bad(format!("missing array {name}")))?;
                if t.len() != p.value.len() {
                    return Err(bad(format!("{name} has the wrong length")));
                }
                slot[id.index()] = t.data().to_vec();
            }
        }
        Ok(TrainState {
            model,
            adam,
            epoch: field("epoch")?.as_u64().ok_or_else(|| bad("train.epoch".into()))? as usize,
            history,
            best,
            best_val: field("best_val")?.as_f64().unwrap_or(f64::NEG_INFINITY),
            bad_epochs: field("bad_epochs")?.as_u64().ok_or_else(|| bad("train.bad_epochs".into()))? as usize,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<TrainState> {
        TrainState::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}
