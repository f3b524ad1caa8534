use std::fs;
use std::path::Path;

use latentdyn::eval::{EvalConfig, Variant};
use latentdyn::model::ModelConfig;
use latentdyn::train::{AdaptMode, TrainConfig};
use latentdyn::world::{VariabilityMode, WorldConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Data generation options beyond the world itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Multiplies every noise standard deviation, giving a shifted world.
    pub noise_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { noise_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    /// Use only the first `n_target` target training sequences.
    pub n_target: Option<usize>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            mode: AdaptMode::DynamicsOnly,
            n_target: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    /// Steps after the training segment; defaults to the dataset's future length.
    pub horizon: Option<usize>,
    pub n_samples: usize,
    pub temperature: f64,
    /// Leading sequences written to the CSV.
    pub max_sequences: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            horizon: None,
            n_samples: 32,
            temperature: 1.0,
            max_sequences: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    pub mode: VariabilityMode,
    pub n_probe: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            mode: VariabilityMode::Noise,
            n_probe: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            variants: Variant::ALL.to_vec(),
        }
    }
}

/// One configuration file for every command. Each command reads the
/// sections it needs; the master seed drives every component seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub adapt: AdaptConfig,
    pub rollout: RolloutConfig,
    pub diagnose: DiagnoseConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the seed override and copies the master seed into every
    /// section, so the echoed config is complete.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<RunConfig, CliError> {
        let seed = seed
            .or(self.seed)
            .ok_or_else(|| CliError::Config("a master seed is required (config `seed` or --seed)".into()))?;
        self.seed = Some(seed);
        self.world.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self.world.validate().map_err(CliError::from)?;
        self.model.validate().map_err(CliError::from)?;
        self.train.validate().map_err(CliError::from)?;
        if !(self.data.noise_scale > 0.0 && self.data.noise_scale.is_finite()) {
            return Err(CliError::Config("data.noise_scale must be positive".into()));
        }
        if self.eval.n_samples < 2 || self.eval.horizons.iter().any(|&h| h == 0) {
            return Err(CliError::Config("eval needs n_samples >= 2 and positive horizons".into()));
        }
        if self.rollout.n_samples == 0 {
            return Err(CliError::Config("rollout.n_samples must be positive".into()));
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("resolved config has a seed")
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }
}

/// Hex SHA-256 of the command, its inputs and the resolved config.
pub fn fingerprint(command: &str, inputs: &[String], config_toml: &str) -> String {
    let mut h = Sha256::new();
    for part in std::iter::once(command).chain(inputs.iter().map(String::as_str)).chain([config_toml]) {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}
