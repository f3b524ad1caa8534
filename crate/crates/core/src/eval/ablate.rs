use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, EvalConfig, EvalReport};
use crate::error::{Error, Result};
use crate::model::{Dynamics, ModelConfig, PriorKind, SsmVae};
use crate::train::{train, EpochRecord, StopReason, TrainConfig};
use crate::world::{SequenceBatch, Standardizer};

/// Model variants that add the structural components one at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// One joint transition network and a fixed standard-normal prior.
    #[serde(rename = "1-mlp-dyn")]
    OneMlpDyn,
    /// Per-coordinate transition networks and a fixed standard-normal prior.
    #[serde(rename = "k-mlp-dyn")]
    KMlpDyn,
    /// Per-coordinate transitions and the conditional flow prior.
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::OneMlpDyn, Variant::KMlpDyn, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::OneMlpDyn => "1-mlp-dyn",
            Variant::KMlpDyn => "k-mlp-dyn",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }

    pub fn configure(self, base: &ModelConfig) -> ModelConfig {
        let (dynamics, prior) = match self {
            Variant::OneMlpDyn => (Dynamics::Joint, PriorKind::Standard),
            Variant::KMlpDyn => (Dynamics::Decomposed, PriorKind::Standard),
            Variant::Full => (Dynamics::Decomposed, PriorKind::Flow),
        };
        ModelConfig {
            dynamics,
            prior,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub variant: Variant,
    pub model: SsmVae,
    pub report: EvalReport,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
}

/// Trains and evaluates each variant on the same data with the same seeds.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    variants: &[Variant],
    base: &ModelConfig,
    train_set: &SequenceBatch,
    val_set: &SequenceBatch,
    eval_set: &SequenceBatch,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
) -> Result<Vec<AblationRun>> {
    let standardizer = Standardizer::fit(train_set)?;
    variants
        .par_iter()
        .map(|&variant| {
            let mut model = SsmVae::new(variant.configure(base))?;
            model.standardizer = standardizer.clone();
            let result = train(model, train_set, val_set, train_cfg, &mut |_| {})?;
            let report = evaluate(&result.model, eval_set, eval_cfg)?;
            Ok(AblationRun {
                variant,
                model: result.model,
                report,
                history: result.history,
                stop: result.stop,
            })
        })
        .collect()
}
