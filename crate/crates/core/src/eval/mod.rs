//! Evaluation: identifiability scores, future prediction and calibration.

mod ablate;
mod assignment;
mod forecast;
mod mcc;

pub use ablate::{ablate, AblationRun, Variant};
pub use assignment::{assignment_cost, hungarian};
pub use forecast::{
    calibration, coverage, future_mse, future_truth, mse_by_horizon, Forecaster, HorizonMse, OracleNoise,
    OracleWorld,
};
pub use mcc::{correlation_matrix, mcc, pearson, ranks, Correlation, MccScore};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SsmVae, TraceValues};
use crate::train::training_segment;
use crate::world::SequenceBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub horizons: Vec<usize>,
    /// Rollouts per sequence for prediction and calibration.
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizons: vec![2, 4, 8],
            n_samples: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mcc_z_pearson: MccScore,
    pub mcc_z_spearman: MccScore,
    pub mcc_s_pearson: MccScore,
    pub mcc_s_spearman: MccScore,
    pub mse_future: Vec<HorizonMse>,
    /// Fraction of future observations inside the ±2 std rollout band.
    pub calibration: f64,
    pub n_sequences: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub wall_clock: f64,
}

impl EvalReport {
    pub fn mse_at(&self, horizon: usize) -> Option<f64> {
        self.mse_future.iter().find(|m| m.horizon == horizon).map(|m| m.mse)
    }
}

/// Posterior-mean latents and noises of the training segment paired with
/// the ground truth, pooled over sequences and steps.
pub struct PooledLatents {
    pub k: usize,
    pub z_est: Vec<f64>,
    pub z_true: Vec<f64>,
    pub s_est: Vec<f64>,
    pub s_true: Vec<f64>,
}

pub fn pooled_latents(model: &SsmVae, batch: &SequenceBatch) -> Result<PooledLatents> {
    if !batch.has_truth() {
        return Err(Error::domain("mcc", "batch carries no ground truth"));
    }
    let x = training_segment(model, batch);
    let tr: TraceValues = model.posterior_means(&x, &batch.env)?;
    let (n, t, k, l) = (batch.len(), batch.t_train(), model.k(), model.markov_order());
    if batch.k != k {
        return Err(Error::shape("mcc", "latent dimension differs from the ground truth"));
    }
    let mut p = PooledLatents {
        k,
        z_est: tr.z.data().to_vec(),
        z_true: Vec::with_capacity(n * t * k),
        s_est: tr.s_mean.data().to_vec(),
        s_true: Vec::with_capacity(n * (t - l) * k),
    };
    for i in 0..n {
        for step in 0..t {
            p.z_true.extend_from_slice(batch.z_frame(i, step).expect("truth"));
        }
        for step in l..t {
            p.s_true.extend_from_slice(batch.s_frame(i, step).expect("truth"));
        }
    }
    Ok(p)
}

impl PooledLatents {
    pub fn mcc_z(&self, method: Correlation) -> Result<MccScore> {
        mcc(&self.z_est, &self.z_true, self.k, method)
    }

    pub fn mcc_s(&self, method: Correlation) -> Result<MccScore> {
        mcc(&self.s_est, &self.s_true, self.k, method)
    }
}

/// Full evaluation of a model on a batch with ground truth.
pub fn evaluate(model: &SsmVae, batch: &SequenceBatch, cfg: &EvalConfig) -> Result<EvalReport> {
    let start = Instant::now();
    let pooled = pooled_latents(model, batch)?;
    let h = batch.t_future;
    let samples = model.forecast(batch, h, cfg.n_samples, cfg.seed)?;
    let truth = future_truth(&model.standardizer, batch, h)?;
    Ok(EvalReport {
        mcc_z_pearson: pooled.mcc_z(Correlation::Pearson)?,
        mcc_z_spearman: pooled.mcc_z(Correlation::Spearman)?,
        mcc_s_pearson: pooled.mcc_s(Correlation::Pearson)?,
        mcc_s_spearman: pooled.mcc_s(Correlation::Spearman)?,
        mse_future: mse_by_horizon(&samples, &truth, &cfg.horizons)?,
        calibration: coverage(&samples, &truth)?,
        n_sequences: batch.len(),
        n_samples: cfg.n_samples,
        seed: cfg.seed,
        wall_clock: start.elapsed().as_secs_f64(),
    })
}
