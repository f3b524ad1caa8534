//! Ground-truth nonstationary latent dynamical systems.
//!
//! A world has `R` environments. In environment `r` the noise is
//! `s_kt ~ N(μ_{k,r}, σ²_{k,r})`, the latent state follows an order-`L`
//! Markov transition in which coordinate `k` is driven only by `s_k`,
//!
//! ```text
//! z_kt = m_k(z_{t-L:t-1}) + c_k(z_{t-L:t-1}) · ρ(s_kt),   c_k > 0, ρ increasing
//! ```
//!
//! and observations are `x_t = g(z_t)` through an injective random network.

mod dataset;
mod variability;

pub use dataset::{dataset_from_bytes, dataset_to_bytes, load_dataset, save_dataset, SequenceBatch, Standardizer, DATASET_MAGIC};
pub use variability::{
    check_sufficient_variability, difference_matrix, VariabilityMode, VariabilityProbe, VariabilityReport,
    VARIABILITY_THRESHOLD,
};

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::rng::{rng_for, tag};
use crate::tensor::Tensor;

/// Smallest singular value every weight matrix of `g` must exceed.
pub const MIN_SINGULAR_VALUE: f64 = 0.1;
const RESAMPLE_BUDGET: usize = 100;

/// Distribution of the weight matrices of `g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationWeights {
    /// Haar-random orthogonal matrices; every direction of `z` stays visible in `x`.
    Orthogonal,
    /// Independent standard-normal entries; condition numbers can reach the hundreds.
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Dimension of latent state, noise and observations.
    pub k: usize,
    pub envs: usize,
    pub markov_order: usize,
    pub t0: usize,
    pub t_dyn: usize,
    pub t_future: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub mu_range: (f64, f64),
    pub sigma_range: (f64, f64),
    /// Hidden width of each transition head.
    pub transition_hidden: usize,
    /// Output scale of the history-dependent mean `m_k`.
    pub transition_gain: f64,
    /// Negative slope of the noise pathway `ρ`.
    pub noise_slope: f64,
    /// All environments share one noise distribution (a degenerate world).
    pub shared_noise: bool,
    pub observation_weights: ObservationWeights,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            k: 8,
            envs: 20,
            markov_order: 2,
            t0: 2,
            t_dyn: 4,
            t_future: 8,
            n_train: 7500,
            n_val: 750,
            n_test: 750,
            seed: 0,
            mu_range: (-1.0, 1.0),
            sigma_range: (0.5, 1.5),
            transition_hidden: 32,
            transition_gain: 0.7,
            noise_slope: 0.2,
            shared_noise: false,
            observation_weights: ObservationWeights::Orthogonal,
        }
    }
}

impl WorldConfig {
    pub fn seq_len(&self) -> usize {
        self.t0 + self.t_dyn + self.t_future
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("envs", self.envs),
            ("markov_order", self.markov_order),
            ("t0", self.t0),
            ("t_dyn", self.t_dyn),
            ("transition_hidden", self.transition_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("world.{name} must be positive")));
        }
        if self.t0 < self.markov_order {
            return Err(Error::Config(format!(
                "world.t0 = {} must be at least the Markov order {}",
                self.t0, self.markov_order
            )));
        }
        let (lo, hi) = self.sigma_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config("world.sigma_range must be positive and ordered".into()));
        }
        let (lo, hi) = self.mu_range;
        if !(lo.is_finite() && hi.is_finite() && hi >= lo) {
            return Err(Error::Config("world.mu_range must be finite and ordered".into()));
        }
        if !(self.noise_slope > 0.0 && self.noise_slope <= 1.0) {
            return Err(Error::Config("world.noise_slope must lie in (0, 1]".into()));
        }
        if !(self.transition_gain.is_finite() && self.transition_gain >= 0.0) {
            return Err(Error::Config("world.transition_gain must be non-negative".into()));
        }
        Ok(())
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

fn softplus(x: f64) -> f64 {
    crate::tensor::softplus(x)
}

/// Orthogonal factor of the QR decomposition of a Gaussian matrix with the
/// signs fixed so that the result is Haar-distributed. Row-major `[k × k]`.
fn haar_orthogonal(k: usize, gauss: &[f64]) -> Vec<f64> {
    let qr = DMatrix::from_row_slice(k, k, gauss).qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| q[(i, j)]).collect()
}

/// Dense layer `y = W x + b`, `W` row-major `[out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub out: usize,
    pub inp: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.out {
            let row = &self.w[i * self.inp..(i + 1) * self.inp];
            y[i] = self.b[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn min_singular_value(&self) -> f64 {
        let m = DMatrix::from_row_slice(self.out, self.inp, &self.w);
        m.singular_values().iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Observation map `g`: two dense layers joined by a leaky-ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationMap {
    pub layers: [Dense; 2],
    pub slope: f64,
}

impl ObservationMap {
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.layers[0].out];
        self.layers[0].apply(z, &mut h);
        for v in &mut h {
            *v = leaky(*v, self.slope);
        }
        let mut x = vec![0.0; self.layers[1].out];
        self.layers[1].apply(&h, &mut x);
        x
    }
}

/// Transition head `k`: a two-layer network on the history producing the
/// mean `m_k` and the pre-activation of the noise scale `c_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionHead {
    pub hidden: Dense,
    pub out: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub g: ObservationMap,
    pub heads: Vec<TransitionHead>,
    /// Negative slope of the activation inside the transition heads.
    pub hidden_slope: f64,
    /// `[R × K]`.
    pub noise_mu: Vec<f64>,
    /// `[R × K]`.
    pub noise_sigma: Vec<f64>,
}

/// Offset added after the softplus so the noise scale stays away from zero.
pub const MIN_NOISE_SCALE: f64 = 0.1;

impl World {
    pub fn build(cfg: &WorldConfig) -> Result<World> {
        cfg.validate()?;
        let k = cfg.k;
        let mut rng = rng_for(cfg.seed, &[tag("world")]);
        let sample_g_layer = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<Dense> {
            for _ in 0..RESAMPLE_BUDGET {
                let gauss: Vec<f64> = (0..k * k).map(|_| rng.sample(StandardNormal)).collect();
                let w = match cfg.observation_weights {
                    ObservationWeights::Gaussian => gauss,
                    ObservationWeights::Orthogonal => haar_orthogonal(k, &gauss),
                };
                let d = Dense {
                    out: k,
                    inp: k,
                    w,
                    b: (0..k).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                };
                if d.min_singular_value() > MIN_SINGULAR_VALUE {
                    return Ok(d);
                }
            }
            Err(Error::Construction(format!(
                "no observation layer with smallest singular value above {MIN_SINGULAR_VALUE} in {RESAMPLE_BUDGET} tries"
            )))
        };
        let g = ObservationMap {
            layers: [sample_g_layer(&mut rng)?, sample_g_layer(&mut rng)?],
            slope: 0.2,
        };
        let lk = cfg.markov_order * k;
        let h = cfg.transition_hidden;
        let heads = (0..k)
            .map(|_| {
                let hidden = Dense {
                    out: h,
                    inp: lk,
                    w: (0..h * lk)
                        .map(|_| rng.sample::<f64, _>(StandardNormal) / (lk as f64).sqrt())
                        .collect(),
                    b: (0..h).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                };
                let mut w = Vec::with_capacity(2 * h);
                for row in 0..2 {
                    let scale = if row == 0 { cfg.transition_gain } else { 0.5 };
                    w.extend((0..h).map(|_| scale * rng.sample::<f64, _>(StandardNormal) / (h as f64).sqrt()));
                }
                let out = Dense {
                    out: 2,
                    inp: h,
                    w,
                    b: vec![0.0, rng.gen_range(-0.5..0.5)],
                };
                TransitionHead { hidden, out }
            })
            .collect();
        let mut noise_mu = vec![0.0; cfg.envs * k];
        let mut noise_sigma = vec![0.0; cfg.envs * k];
        for r in 0..cfg.envs {
            for j in 0..k {
                let src = if cfg.shared_noise { 0 } else { r };
                if src == r {
                    noise_mu[r * k + j] = rng.gen_range(cfg.mu_range.0..=cfg.mu_range.1);
                    noise_sigma[r * k + j] = rng.gen_range(cfg.sigma_range.0..=cfg.sigma_range.1);
                } else {
                    noise_mu[r * k + j] = noise_mu[j];
                    noise_sigma[r * k + j] = noise_sigma[j];
                }
            }
        }
        Ok(World {
            config: cfg.clone(),
            g,
            heads,
            hidden_slope: 0.2,
            noise_mu,
            noise_sigma,
        })
    }

    /// A linear-Gaussian world: `g` is the identity, `z_kt = a z_{k,t-1} + c s_kt`.
    pub fn linear_gaussian(cfg: &WorldConfig, a: f64, c: f64) -> Result<World> {
        let mut w = World::build(cfg)?;
        let k = cfg.k;
        let lk = cfg.markov_order * k;
        let eye = |n: usize| {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                m[i * n + i] = 1.0;
            }
            m
        };
        w.g = ObservationMap {
            layers: [
                Dense { out: k, inp: k, w: eye(k), b: vec![0.0; k] },
                Dense { out: k, inp: k, w: eye(k), b: vec![0.0; k] },
            ],
            slope: 1.0,
        };
        if c <= MIN_NOISE_SCALE {
            return Err(Error::Config(format!("noise scale must exceed {MIN_NOISE_SCALE}")));
        }
        let c_pre = ((c - MIN_NOISE_SCALE).exp() - 1.0).ln();
        w.heads = (0..k)
            .map(|j| {
                let mut sel = vec![0.0; lk];
                sel[(cfg.markov_order - 1) * k + j] = 1.0;
                TransitionHead {
                    hidden: Dense { out: 1, inp: lk, w: sel, b: vec![0.0] },
                    out: Dense { out: 2, inp: 1, w: vec![a, 0.0], b: vec![0.0, c_pre] },
                }
            })
            .collect();
        w.hidden_slope = 1.0;
        w.config.noise_slope = 1.0;
        w.config.transition_hidden = 1;
        Ok(w)
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn envs(&self) -> usize {
        self.config.envs
    }

    pub fn markov_order(&self) -> usize {
        self.config.markov_order
    }

    /// Inputs of one transition head: the flattened history plus its noise.
    pub fn head_input_width(&self) -> usize {
        self.heads[0].hidden.inp + 1
    }

    pub fn mu(&self, env: usize, k: usize) -> f64 {
        self.noise_mu[env * self.k() + k]
    }

    pub fn sigma(&self, env: usize, k: usize) -> f64 {
        self.noise_sigma[env * self.k() + k]
    }

    /// Same dynamics and observation map, every noise σ multiplied by `factor`.
    pub fn with_noise_scale(&self, factor: f64) -> World {
        let mut w = self.clone();
        for s in &mut w.noise_sigma {
            *s *= factor;
        }
        w
    }

    pub fn observe(&self, z: &[f64]) -> Vec<f64> {
        self.g.apply(z)
    }

    /// `(m_k, c_k)` for a history `z_{t-L}, …, z_{t-1}` (oldest first).
    pub fn head_terms(&self, k: usize, hist: &[f64]) -> (f64, f64) {
        let head = &self.heads[k];
        let mut h = vec![0.0; head.hidden.out];
        head.hidden.apply(hist, &mut h);
        for v in &mut h {
            *v = leaky(*v, self.hidden_slope);
        }
        let mut o = [0.0; 2];
        head.out.apply(&h, &mut o);
        (o[0], softplus(o[1]) + MIN_NOISE_SCALE)
    }

    pub fn rho(&self, s: f64) -> f64 {
        leaky(s, self.config.noise_slope)
    }

    pub fn transition(&self, hist: &[f64], s: &[f64]) -> Vec<f64> {
        (0..self.k())
            .map(|k| {
                let (m, c) = self.head_terms(k, hist);
                m + c * self.rho(s[k])
            })
            .collect()
    }

    /// `∂z_k / ∂s_k` at the given history and noise value.
    pub fn noise_derivative(&self, k: usize, hist: &[f64], s_k: f64) -> f64 {
        let (_, c) = self.head_terms(k, hist);
        c * leaky_grad(s_k, self.config.noise_slope)
    }

    /// Recovers the noise that maps `hist` to `z`.
    pub fn invert_transition(&self, hist: &[f64], z: &[f64]) -> Vec<f64> {
        let slope = self.config.noise_slope;
        (0..self.k())
            .map(|k| {
                let (m, c) = self.head_terms(k, hist);
                let r = (z[k] - m) / c;
                if r >= 0.0 {
                    r
                } else {
                    r / slope
                }
            })
            .collect()
    }

    pub fn sample_noise<R: Rng>(&self, env: usize, rng: &mut R) -> Vec<f64> {
        (0..self.k())
            .map(|k| {
                let d = Normal::new(self.mu(env, k), self.sigma(env, k)).expect("positive sigma");
                d.sample(rng)
            })
            .collect()
    }

    /// Simulates `n` sequences of environment `env`. Sequence `i` uses a
    /// generator derived from `(seed, env, i)`.
    pub fn simulate(&self, env: usize, n: usize, seed: u64) -> Result<SequenceBatch> {
        if env >= self.envs() {
            return Err(Error::domain(
                "simulate",
                format!("environment {env} out of range for {} environments", self.envs()),
            ));
        }
        self.simulate_envs(&vec![env; n], &(0..n as u64).collect::<Vec<_>>(), seed)
    }

    /// Simulates one split with `n_per_env` sequences for every environment.
    pub fn simulate_split(&self, n_per_env: usize, seed: u64) -> Result<SequenceBatch> {
        let envs: Vec<usize> = (0..self.envs()).flat_map(|r| std::iter::repeat(r).take(n_per_env)).collect();
        let idx: Vec<u64> = (0..self.envs()).flat_map(|_| 0..n_per_env as u64).collect();
        self.simulate_envs(&envs, &idx, seed)
    }

    fn simulate_envs(&self, envs: &[usize], idx: &[u64], seed: u64) -> Result<SequenceBatch> {
        let (k, l, t) = (self.k(), self.markov_order(), self.config.seq_len());
        let seqs: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = envs
            .par_iter()
            .zip(idx)
            .map(|(&env, &i)| {
                let mut rng = rng_for(seed, &[env as u64, i]);
                let mut z: Vec<f64> = (0..l * k).map(|_| rng.sample(StandardNormal)).collect();
                let mut s = Vec::with_capacity(t * k);
                let mut x = Vec::with_capacity(t * k);
                for step in 0..t {
                    let noise = self.sample_noise(env, &mut rng);
                    let next = self.transition(&z[step * k..(step + l) * k], &noise);
                    x.extend(self.observe(&next));
                    z.extend(next);
                    s.extend(noise);
                }
                (x, z, s)
            })
            .collect();
        let n = envs.len();
        let mut x = Vec::with_capacity(n * t * k);
        let mut z = Vec::with_capacity(n * (t + l) * k);
        let mut s = Vec::with_capacity(n * t * k);
        for (xs, zs, ss) in seqs {
            x.extend(xs);
            z.extend(zs);
            s.extend(ss);
        }
        if x.iter().chain(&z).any(|v| !v.is_finite()) {
            return Err(Error::numeric("simulate", "ground-truth trajectory diverged"));
        }
        Ok(SequenceBatch {
            k,
            markov_order: l,
            t0: self.config.t0,
            t_dyn: self.config.t_dyn,
            t_future: self.config.t_future,
            envs_total: self.envs(),
            seed,
            x: Tensor::new(vec![n, t, k], x)?,
            env: envs.to_vec(),
            z_true: Some(Tensor::new(vec![n, t + l, k], z)?),
            s_true: Some(Tensor::new(vec![n, t, k], s)?),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "kind": "world",
            "config": self.config,
            "hidden_slope": self.hidden_slope,
            "observation_slope": self.g.slope,
        });
        let mut ck = Checkpoint::new(meta);
        let mat = |d: &Dense| Tensor::new(vec![d.out, d.inp], d.w.clone());
        for (i, d) in self.g.layers.iter().enumerate() {
            ck.push(format!("g.{i}.weight"), "observation", mat(d)?);
            ck.push(format!("g.{i}.bias"), "observation", Tensor::vector(d.b.clone())?);
        }
        for (k, h) in self.heads.iter().enumerate() {
            ck.push(format!("f.{k}.hidden.weight"), "transition", mat(&h.hidden)?);
            ck.push(format!("f.{k}.hidden.bias"), "transition", Tensor::vector(h.hidden.b.clone())?);
            ck.push(format!("f.{k}.out.weight"), "transition", mat(&h.out)?);
            ck.push(format!("f.{k}.out.bias"), "transition", Tensor::vector(h.out.b.clone())?);
        }
        let (r, k) = (self.envs(), self.k());
        ck.push("noise.mu", "noise", Tensor::new(vec![r, k], self.noise_mu.clone())?);
        ck.push("noise.sigma", "noise", Tensor::new(vec![r, k], self.noise_sigma.clone())?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<World> {
        let bad = |d: String| Error::format(path, d);
        if ck.meta.get("kind").and_then(|v| v.as_str()) != Some("world") {
            return Err(bad("not a world file".into()));
        }
        let config: WorldConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| bad(format!("world config: {e}")))?;
        let num = |key: &str| ck.meta.get(key).and_then(|v| v.as_f64()).ok_or_else(|| bad(format!("missing {key}")));
        let get = |name: &str| ck.get(name).ok_or_else(|| bad(format!("missing array {name}")));
        let dense = |prefix: &str| -> Result<Dense> {
            let w = get(&format!("{prefix}.weight"))?;
            let b = get(&format!("{prefix}.bias"))?;
            if w.rank() != 2 || b.len() != w.shape()[0] {
                return Err(bad(format!("{prefix}: inconsistent shapes")));
            }
            Ok(Dense {
                out: w.shape()[0],
                inp: w.shape()[1],
                w: w.data().to_vec(),
                b: b.data().to_vec(),
            })
        };
        let g = ObservationMap {
            layers: [dense("g.0")?, dense("g.1")?],
            slope: num("observation_slope")?,
        };
        let heads = (0..config.k)
            .map(|k| {
                Ok(TransitionHead {
                    hidden: dense(&format!("f.{k}.hidden"))?,
                    out: dense(&format!("f.{k}.out"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let world = World {
            g,
            heads,
            hidden_slope: num("hidden_slope")?,
            noise_mu: get("noise.mu")?.data().to_vec(),
            noise_sigma: get("noise.sigma")?.data().to_vec(),
            config,
        };
        if world.noise_mu.len() != world.envs() * world.k() {
            return Err(bad("noise table does not match the configuration".into()));
        }
        Ok(world)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<World> {
        World::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}
