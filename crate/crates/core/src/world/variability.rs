//! Numerical rank checks of the sufficient-variability conditions.
//!
//! For Gaussian noise the log density `q_k(s_k | u)` has
//! `∂q_k/∂s_k = −(s_k − μ_{k,u})/σ²_{k,u}` and `∂²q_k/∂s_k² = −1/σ²_{k,u}`.
//! Stacking these into `v(s, u) ∈ R^{2K}` and differencing across `2K + 1`
//! consecutive environments gives a `2K × 2K` matrix that must be
//! nonsingular. Latent mode pushes the density through the transition: at
//! fixed history `∂/∂z_k = (1/f'_k) ∂/∂s_k` with `f'_k = c_k·ρ'(s_k)`, and the
//! log-Jacobian term does not depend on `u`, so it cancels in the differences.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::World;
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

/// Smallest singular value a probe matrix must exceed.
pub const VARIABILITY_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariabilityMode {
    /// Conditions on the latent state density.
    Latent,
    /// Conditions on the process noise density.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariabilityProbe {
    /// Noise value at which the derivatives were taken.
    pub s: Vec<f64>,
    /// Row `j` is `v(·, u_{j+1}) − v(·, u_j)`; columns are the `K` first
    /// derivatives followed by the `K` second derivatives.
    pub matrix: Vec<Vec<f64>>,
    pub min_singular_value: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariabilityReport {
    pub mode: VariabilityMode,
    pub threshold: f64,
    /// Environments used, in stacking order.
    pub environments: Vec<usize>,
    pub probes: Vec<VariabilityProbe>,
    /// True when every probe passed.
    pub passed: bool,
}

impl VariabilityReport {
    pub fn min_singular_value(&self) -> f64 {
        self.probes.iter().map(|p| p.min_singular_value).fold(f64::INFINITY, f64::min)
    }
}

/// Derivative vector `v(s, u)` of the noise log density, each coordinate
/// divided by the matching power of `scale`.
fn derivative_vector(world: &World, env: usize, s: &[f64], scale: &[f64]) -> Vec<f64> {
    let k = world.k();
    let mut v = vec![0.0; 2 * k];
    for j in 0..k {
        let var = world.sigma(env, j).powi(2);
        v[j] = -(s[j] - world.mu(env, j)) / var / scale[j];
        v[k + j] = -1.0 / var / scale[j].powi(2);
    }
    v
}

/// Builds the difference matrix for one probe point.
pub fn difference_matrix(world: &World, envs: &[usize], s: &[f64], scale: &[f64]) -> Vec<Vec<f64>> {
    let vs: Vec<Vec<f64>> = envs.iter().map(|&e| derivative_vector(world, e, s, scale)).collect();
    vs.windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect())
        .collect()
}

fn smallest_singular_value(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    DMatrix::from_row_slice(n, m, &flat)
        .singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Probes the condition at `n_probe` random points using the first
/// `2K + 1` environments.
pub fn check_sufficient_variability(
    world: &World,
    mode: VariabilityMode,
    n_probe: usize,
    seed: u64,
) -> Result<VariabilityReport> {
    let k = world.k();
    let needed = 2 * k + 1;
    if world.envs() < needed {
        return Err(Error::InsufficientEnvironments {
            needed,
            available: world.envs(),
        });
    }
    if n_probe == 0 {
        return Err(Error::domain("check_sufficient_variability", "n_probe must be positive"));
    }
    let envs: Vec<usize> = (0..needed).collect();
    let lk = world.markov_order() * k;
    let mut rng = rng_for(seed, &[tag("variability")]);
    let probes = (0..n_probe)
        .map(|_| {
            let s: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
            let scale = match mode {
                VariabilityMode::Noise => vec![1.0; k],
                VariabilityMode::Latent => {
                    let hist: Vec<f64> = (0..lk).map(|_| StandardNormal.sample(&mut rng)).collect();
                    (0..k).map(|j| world.noise_derivative(j, &hist, s[j])).collect()
                }
            };
            let matrix = difference_matrix(world, &envs, &s, &scale);
            let min_singular_value = smallest_singular_value(&matrix);
            VariabilityProbe {
                s,
                matrix,
                min_singular_value,
                passed: min_singular_value > VARIABILITY_THRESHOLD,
            }
        })
        .collect::<Vec<_>>();
    Ok(VariabilityReport {
        mode,
        threshold: VARIABILITY_THRESHOLD,
        environments: envs,
        passed: probes.iter().all(|p| p.passed),
        probes,
    })
}
