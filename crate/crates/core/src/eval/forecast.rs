use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{frame, SsmVae};
use crate::rng::{rng_for, tag};
use crate::tensor::Tensor;
use crate::train::training_segment;
use crate::world::{SequenceBatch, Standardizer, World};

/// Anything that can sample future observations after the training
/// segment of a batch, in standardized coordinates.
pub trait Forecaster: Sync {
    fn standardizer(&self) -> &Standardizer;

    /// Samples `[N, S, H, D]` for frames `t_train..t_train + horizon`.
    fn forecast(&self, batch: &SequenceBatch, horizon: usize, n_samples: usize, seed: u64) -> Result<Tensor>;
}

fn check_horizon(batch: &SequenceBatch, horizon: usize) -> Result<()> {
    if horizon > batch.t_future {
        return Err(Error::domain(
            "forecast",
            format!("horizon {horizon} exceeds the {} future frames", batch.t_future),
        ));
    }
    Ok(())
}

impl Forecaster for SsmVae {
    fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    /// Filters the training segment with posterior means, then rolls the
    /// last `L` states forward under the prior.
    fn forecast(&self, batch: &SequenceBatch, horizon: usize, n_samples: usize, seed: u64) -> Result<Tensor> {
        check_horizon(batch, horizon)?;
        let x = training_segment(self, batch);
        let trace = self.posterior_means(&x, &batch.env)?;
        let (n, t, k, l) = (batch.len(), x.shape()[1], self.k(), self.markov_order());
        let mut hist = Vec::with_capacity(n * l * k);
        for i in 0..n {
            hist.extend_from_slice(&trace.z.data()[(i * t + t - l) * k..(i * t + t) * k]);
        }
        let hist = Tensor::new(vec![n, l * k], hist)?;
        Ok(self.rollout(&hist, &batch.env, horizon, n_samples, 1.0, seed)?.x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleNoise {
    /// Replays the stored noise, reproducing the data exactly.
    Recorded,
    /// Draws fresh noise from the true environment distribution.
    Sampled,
}

/// Ground-truth dynamics started from the true latent history.
pub struct OracleWorld<'a> {
    pub world: &'a World,
    pub standardizer: Standardizer,
    pub noise: OracleNoise,
}

impl Forecaster for OracleWorld<'_> {
    fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    fn forecast(&self, batch: &SequenceBatch, horizon: usize, n_samples: usize, seed: u64) -> Result<Tensor> {
        check_horizon(batch, horizon)?;
        if !batch.has_truth() {
            return Err(Error::domain("oracle_forecast", "batch carries no ground truth"));
        }
        let (n, d, k, l) = (batch.len(), batch.k, self.world.k(), self.world.markov_order());
        let start = batch.t_train();
        let mut out = vec![0.0; n * n_samples * horizon * d];
        for i in 0..n {
            let mut rng = rng_for(seed, &[tag("oracle"), i as u64]);
            for s in 0..n_samples {
                let mut hist = batch.z_history(i, start).expect("truth").to_vec();
                for h in 0..horizon {
                    let noise = match self.noise {
                        OracleNoise::Recorded => batch.s_frame(i, start + h).expect("truth").to_vec(),
                        OracleNoise::Sampled => self.world.sample_noise(batch.env[i], &mut rng),
                    };
                    let z = self.world.transition(&hist, &noise);
                    let x = self.standardizer.transform_row(&self.world.observe(&z));
                    let at = ((i * n_samples + s) * horizon + h) * d;
                    out[at..at + d].copy_from_slice(&x);
                    hist.drain(..k);
                    hist.extend(z);
                    debug_assert_eq!(hist.len(), l * k);
                }
            }
        }
        Tensor::new(vec![n, n_samples, horizon, d], out)
    }
}

/// Standardized observed frames `t_train..t_train + horizon`, `[N, H, D]`.
pub fn future_truth(standardizer: &Standardizer, batch: &SequenceBatch, horizon: usize) -> Result<Tensor> {
    check_horizon(batch, horizon)?;
    let x = standardizer.apply(batch).x;
    let frames: Vec<Tensor> = (0..horizon).map(|h| frame(&x, batch.t_train() + h)).collect();
    Ok(crate::model::stack_frames(&frames))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMse {
    pub horizon: usize,
    pub mse: f64,
}

/// Mean over samples of `[N, S, H, D]`, giving `[N, H, D]`.
fn sample_mean(samples: &Tensor) -> Vec<f64> {
    let (n, s, h, d) = dims4(samples);
    let mut m = vec![0.0; n * h * d];
    for i in 0..n {
        for smp in 0..s {
            let src = &samples.data()[(i * s + smp) * h * d..(i * s + smp + 1) * h * d];
            for (a, v) in m[i * h * d..(i + 1) * h * d].iter_mut().zip(src) {
                *a += v / s as f64;
            }
        }
    }
    m
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

/// MSE of the sample-mean prediction against the truth `[N, H, D]`,
/// averaged over dimensions, the first `h` steps and sequences.
pub fn mse_by_horizon(samples: &Tensor, truth: &Tensor, horizons: &[usize]) -> Result<Vec<HorizonMse>> {
    let (n, _, h_max, d) = dims4(samples);
    if truth.shape() != [n, h_max, d] {
        return Err(Error::shape("future_mse", "samples and truth disagree"));
    }
    let pred = sample_mean(samples);
    horizons
        .iter()
        .map(|&h| {
            if h == 0 || h > h_max {
                return Err(Error::domain("future_mse", format!("horizon {h} outside 1..={h_max}")));
            }
            let mut sum = 0.0;
            for i in 0..n {
                let range = i * h_max * d..(i * h_max + h) * d;
                sum += pred[range.clone()]
                    .iter()
                    .zip(&truth.data()[range])
                    .map(|(p, t)| (p - t).powi(2))
                    .sum::<f64>();
            }
            Ok(HorizonMse {
                horizon: h,
                mse: sum / (n * h * d) as f64,
            })
        })
        .collect()
}

/// Future-prediction error for each horizon, from one set of rollouts.
pub fn future_mse(
    f: &dyn Forecaster,
    batch: &SequenceBatch,
    horizons: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<HorizonMse>> {
    let h = horizons.iter().copied().max().unwrap_or(0);
    let samples = f.forecast(batch, h, n_samples, seed)?;
    mse_by_horizon(&samples, &future_truth(f.standardizer(), batch, h)?, horizons)
}

/// Fraction of truth values inside `mean ± 2·std` of the samples, where
/// `std` is the sample standard deviation across samples.
pub fn coverage(samples: &Tensor, truth: &Tensor) -> Result<f64> {
    let (n, s, h, d) = dims4(samples);
    if s < 2 {
        return Err(Error::domain("calibration", "need at least two samples"));
    }
    if truth.shape() != [n, h, d] {
        return Err(Error::shape("calibration", "samples and truth disagree"));
    }
    let mut inside = 0usize;
    for i in 0..n {
        for step in 0..h {
            for j in 0..d {
                let at = |smp: usize| samples.data()[((i * s + smp) * h + step) * d + j];
                let m = (0..s).map(at).sum::<f64>() / s as f64;
                let sd = ((0..s).map(|x| (at(x) - m).powi(2)).sum::<f64>() / (s - 1) as f64).sqrt();
                let y = truth.data()[(i * h + step) * d + j];
                if (y - m).abs() <= 2.0 * sd {
                    inside += 1;
                }
            }
        }
    }
    Ok(inside as f64 / (n * h * d) as f64)
}

pub fn calibration(f: &dyn Forecaster, batch: &SequenceBatch, n_samples: usize, seed: u64) -> Result<f64> {
    if n_samples < 2 {
        return Err(Error::domain("calibration", "need at least two samples"));
    }
    let h = batch.t_future;
    let samples = f.forecast(batch, h, n_samples, seed)?;
    coverage(&samples, &future_truth(f.standardizer(), batch, h)?)
}
