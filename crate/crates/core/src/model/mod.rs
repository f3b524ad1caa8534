//! The sequential variational auto-encoder.
//!
//! Observations are embedded frame by frame. The first `L` latent states
//! come from an initial-condition encoder on the first `T_ic` embeddings.
//! Every later state is produced deterministically by the transition from
//! the previous `L` states and a process noise sample, whose posterior is a
//! filtering distribution computed by a GRU over the embeddings seen so far.

mod checkpoint;

pub use checkpoint::MODEL_KIND;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{one_hot, FlowConfig, FlowInit, NoisePrior};
use crate::nn::{Graph, GruCell, Mlp, ParamStore};
use crate::rng::{rng_for, tag};
use crate::tensor::{Tape, Tensor, Var};
use crate::world::Standardizer;

/// Log-variances leaving the encoders are clamped to this interval.
pub const LOG_VAR_LIMIT: f64 = 10.0;

/// Parameter groups, used for freezing and gradient bookkeeping.
pub mod groups {
    pub const EMBEDDER: &str = "embedder";
    pub const IC_ENCODER: &str = "ic_encoder";
    pub const NOISE_ENCODER: &str = "noise_encoder";
    pub const TRANSITION: &str = "transition";
    pub const DECODER: &str = "decoder";
    pub const PRIOR: &str = "prior";

    pub const ALL: [&str; 6] = [EMBEDDER, IC_ENCODER, NOISE_ENCODER, TRANSITION, DECODER, PRIOR];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dynamics {
    /// One network per latent coordinate, each reading a single noise value.
    Decomposed,
    /// One network mapping the whole history and noise vector to the state.
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    /// Conditional spline flow on the environment.
    Flow,
    /// Fixed standard normal for every environment.
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Latent and noise dimension.
    pub k: usize,
    /// Observation dimension.
    pub d: usize,
    pub markov_order: usize,
    pub hidden: usize,
    pub embedding: usize,
    /// Number of linear layers in the observation embedder.
    pub embedder_layers: usize,
    /// Frames seen by the initial-condition encoder.
    pub t_ic: usize,
    /// Number of environments (width of the one-hot `u`).
    pub envs: usize,
    pub flow: FlowConfig,
    pub dynamics: Dynamics,
    pub prior: PriorKind,
    /// Feed `u` to the noise encoder as well as the prior.
    pub condition_encoder_on_u: bool,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 8,
            d: 8,
            markov_order: 2,
            hidden: 64,
            embedding: 64,
            embedder_layers: 4,
            t_ic: 2,
            envs: 20,
            flow: FlowConfig::default(),
            dynamics: Dynamics::Decomposed,
            prior: PriorKind::Flow,
            condition_encoder_on_u: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("d", self.d),
            ("markov_order", self.markov_order),
            ("hidden", self.hidden),
            ("embedding", self.embedding),
            ("embedder_layers", self.embedder_layers),
            ("envs", self.envs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.t_ic < self.markov_order {
            return Err(Error::Config(format!(
                "model.t_ic = {} must be at least the Markov order {}",
                self.t_ic, self.markov_order
            )));
        }
        self.flow.validate()
    }

    /// Width of the flattened history `z_{t-L:t-1}`.
    pub fn history_width(&self) -> usize {
        self.markov_order * self.k
    }
}

/// Mean and clamped log-variance of a diagonal Gaussian on the tape.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVar {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVar {
    pub fn values(&self, tape: &Tape) -> Result<GaussianParams> {
        Ok(GaussianParams {
            mean: tape.value(self.mean)?,
            log_variance: tape.value(self.log_var)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub log_variance: Tensor,
}

/// How posterior samples are drawn in a forward pass.
pub enum Sampling<'r, R: Rng> {
    /// Reparameterized draws from the given generator.
    Random(&'r mut R),
    /// Posterior means (zero-variance draws).
    Mean,
}

/// One posterior step of the process noise.
#[derive(Clone, Copy, Debug)]
pub struct NoiseStep {
    pub params: GaussianVar,
    /// Standardized draw `ε`, so that `s = μ + σ ε`.
    pub eps: Var,
    pub sample: Var,
    /// Flattened history `z_{t-L:t-1}` that was fed to the transition.
    pub history: Var,
}

/// Everything a filtering pass recorded on the tape.
#[derive(Clone, Debug)]
pub struct PosteriorTrace {
    pub initial: GaussianVar,
    pub initial_eps: Var,
    /// `[N, L·K]`.
    pub initial_sample: Var,
    /// One entry per transition step, for frames `L..T`.
    pub noise: Vec<NoiseStep>,
    /// Latent state of every frame, `[N, K]` each.
    pub z: Vec<Var>,
    /// Decoded mean of every frame, `[N, D]` each.
    pub x_hat: Vec<Var>,
}

/// Posterior trace values: `z` is `[N, T, K]`, `s` is `[N, T - L, K]`.
#[derive(Clone, Debug)]
pub struct TraceValues {
    pub z: Tensor,
    pub s: Tensor,
    pub s_mean: Tensor,
    pub x_hat: Tensor,
    pub initial: GaussianParams,
}

#[derive(Clone, Debug)]
pub enum Transitions {
    Decomposed(Vec<Mlp>),
    Joint(Mlp),
}

#[derive(Clone, Debug)]
pub struct SsmVae {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedder: Mlp,
    pub ic_encoder: Mlp,
    pub noise_gru: GruCell,
    pub s_encoder: Mlp,
    pub transitions: Transitions,
    pub decoder: Mlp,
    pub prior: Option<NoisePrior>,
    /// Statistics applied to raw observations before they reach the model.
    pub standardizer: Standardizer,
}

/// Stacks per-frame `[N, W]` values into `[N, T, W]`.
pub fn stack_frames(frames: &[Tensor]) -> Tensor {
    let n = frames.first().map_or(0, |f| f.shape()[0]);
    let w = frames.first().map_or(0, |f| f.shape()[1]);
    let t = frames.len();
    let mut data = vec![0.0; n * t * w];
    for (step, f) in frames.iter().enumerate() {
        for i in 0..n {
            data[(i * t + step) * w..(i * t + step + 1) * w].copy_from_slice(&f.data()[i * w..(i + 1) * w]);
        }
    }
    Tensor::from_parts(vec![n, t, w], data)
}

/// Frame `t` of a `[N, T, W]` tensor as `[N, W]`.
pub fn frame(x: &Tensor, t: usize) -> Tensor {
    let (n, tt, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut data = Vec::with_capacity(n * w);
    for i in 0..n {
        data.extend_from_slice(&x.data()[(i * tt + t) * w..(i * tt + t + 1) * w]);
    }
    Tensor::from_parts(vec![n, w], data)
}

fn gaussian_noise<R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

fn at_step(t: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op,
            detail: format!("step {t}: {detail}"),
        },
        other => other,
    }
}

impl SsmVae {
    pub fn new(config: ModelConfig) -> Result<SsmVae> {
        Self::with_flow_init(config, FlowInit::Identity)
    }

    pub fn with_flow_init(config: ModelConfig, flow_init: FlowInit) -> Result<SsmVae> {
        use groups::*;
        config.validate()?;
        let c = &config;
        let mut rng = rng_for(c.init_seed, &[tag("model")]);
        let mut store = ParamStore::new();
        let mut widths = vec![c.d];
        widths.extend(std::iter::repeat(c.embedding).take(c.embedder_layers));
        let embedder = Mlp::new(&mut store, "embedder", EMBEDDER, &widths, &mut rng);
        let lk = c.history_width();
        let ic_encoder = Mlp::new(
            &mut store,
            "ic_encoder",
            IC_ENCODER,
            &[c.t_ic * c.embedding, c.hidden, c.hidden, 2 * lk],
            &mut rng,
        );
        let noise_gru = GruCell::new(&mut store, "noise_gru", NOISE_ENCODER, c.embedding, c.hidden, &mut rng);
        let u_extra = if c.condition_encoder_on_u { c.envs } else { 0 };
        let s_encoder = Mlp::new(
            &mut store,
            "s_encoder",
            NOISE_ENCODER,
            &[c.hidden + lk + u_extra, c.hidden, c.hidden, 2 * c.k],
            &mut rng,
        );
        let transitions = match c.dynamics {
            Dynamics::Decomposed => Transitions::Decomposed(
                (0..c.k)
                    .map(|j| {
                        Mlp::new(
                            &mut store,
                            &format!("transition.{j}"),
                            TRANSITION,
                            &[lk + 1, c.hidden, c.hidden, 1],
                            &mut rng,
                        )
                    })
                    .collect(),
            ),
            Dynamics::Joint => Transitions::Joint(Mlp::new(
                &mut store,
                "transition",
                TRANSITION,
                &[lk + c.k, c.hidden, c.hidden, c.k],
                &mut rng,
            )),
        };
        let decoder = Mlp::new(&mut store, "decoder", DECODER, &[c.k, c.hidden, c.hidden, c.d], &mut rng);
        let prior = match c.prior {
            PriorKind::Flow => Some(NoisePrior::new(
                &mut store, "prior", PRIOR, c.envs, c.k, &c.flow, flow_init, &mut rng,
            )?),
            PriorKind::Standard => None,
        };
        Ok(SsmVae {
            standardizer: Standardizer::identity(c.d),
            config,
            store,
            embedder,
            ic_encoder,
            noise_gru,
            s_encoder,
            transitions,
            decoder,
            prior,
        })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn markov_order(&self) -> usize {
        self.config.markov_order
    }

    /// `r_t` from `x_t`, `[N, D] → [N, E]`.
    pub fn embed(&self, g: &Graph, x: Var) -> Result<Var> {
        self.embedder.forward(g, x)
    }

    fn split_gaussian(&self, g: &Graph, out: Var, width: usize) -> Result<GaussianVar> {
        let t = g.tape();
        let mean = t.slice(out, 1, 0, width)?;
        let log_var = t.clamp(t.slice(out, 1, width, 2 * width)?, -LOG_VAR_LIMIT, LOG_VAR_LIMIT)?;
        Ok(GaussianVar { mean, log_var })
    }

    /// Posterior over the `L` initial states from the first `T_ic`
    /// embeddings. Mean and log-variance are `[N, L·K]`, oldest state first.
    pub fn encode_initial(&self, g: &Graph, r: &[Var]) -> Result<GaussianVar> {
        if r.len() != self.config.t_ic {
            return Err(Error::shape(
                "encode_initial",
                format!("expected {} embeddings, got {}", self.config.t_ic, r.len()),
            ));
        }
        let out = self.ic_encoder.forward(g, g.tape().concat(r, 1)?)?;
        self.split_gaussian(g, out, self.config.history_width())
    }

    /// Advances the filtering GRU with `r_t` and returns the posterior of
    /// `s_t` given the new state and the history.
    pub fn encode_noise_step(
        &self,
        g: &Graph,
        gru_state: Var,
        r_t: Var,
        z_hist: Var,
        u: Option<Var>,
    ) -> Result<(GaussianVar, Var)> {
        let t = g.tape();
        let lk = self.config.history_width();
        let hs = t.shape(z_hist)?;
        if hs.len() != 2 || hs[1] != lk {
            return Err(Error::shape(
                "encode_noise_step",
                format!("history must be [N, {lk}], got {hs:?}"),
            ));
        }
        let h = self.noise_gru.step(g, r_t, gru_state)?;
        let mut parts = vec![h, z_hist];
        if self.config.condition_encoder_on_u {
            parts.push(u.ok_or_else(|| Error::shape("encode_noise_step", "encoder expects u"))?);
        }
        let out = self.s_encoder.forward(g, t.concat(&parts, 1)?)?;
        Ok((self.split_gaussian(g, out, self.k())?, h))
    }

    /// `z_t` from the flattened history `[N, L·K]` and noise `[N, K]`.
    pub fn transition(&self, g: &Graph, z_hist: Var, s: Var) -> Result<Var> {
        let t = g.tape();
        let (hs, ss) = (t.shape(z_hist)?, t.shape(s)?);
        let (lk, k) = (self.config.history_width(), self.k());
        if hs.len() != 2 || ss.len() != 2 || hs[1] != lk || ss[1] != k || hs[0] != ss[0] {
            return Err(Error::shape(
                "transition",
                format!("history {hs:?} and noise {ss:?} for L·K = {lk}, K = {k}"),
            ));
        }
        match &self.transitions {
            Transitions::Decomposed(heads) => {
                let outs = heads
                    .iter()
                    .enumerate()
                    .map(|(j, head)| {
                        let input = t.concat(&[z_hist, t.slice(s, 1, j, j + 1)?], 1)?;
                        head.forward(g, input)
                    })
                    .collect::<Result<Vec<_>>>()?;
                t.concat(&outs, 1)
            }
            Transitions::Joint(net) => net.forward(g, t.concat(&[z_hist, s], 1)?),
        }
    }

    /// Mean of the Gaussian observation model.
    pub fn decode(&self, g: &Graph, z: Var) -> Result<Var> {
        self.decoder.forward(g, z)
    }

    /// `s = μ + exp(½ log σ²) ε` for a fixed draw `ε`; returns `(ε, s)`.
    pub fn reparameterize(&self, g: &Graph, p: GaussianVar, eps: Tensor) -> Result<(Var, Var)> {
        let t = g.tape();
        let eps = t.constant(eps)?;
        let std = t.exp(t.scale(p.log_var, 0.5)?)?;
        Ok((eps, t.add(p.mean, t.mul(std, eps)?)?))
    }

    /// Runs the filtering pass over frames `0..x.shape()[1]` of
    /// standardized observations `x` `[N, T, D]`.
    pub fn filter_forward<R: Rng>(
        &self,
        g: &Graph,
        x: &Tensor,
        env: &[usize],
        mut sampling: Sampling<'_, R>,
    ) -> Result<PosteriorTrace> {
        let t = g.tape();
        let c = &self.config;
        let (l, k) = (c.markov_order, c.k);
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != c.d || env.len() != shape[0] {
            return Err(Error::shape(
                "filter_forward",
                format!("observations {shape:?} with {} labels for D = {}", env.len(), c.d),
            ));
        }
        let (n, steps) = (shape[0], shape[1]);
        if steps < c.t_ic || steps <= l {
            return Err(Error::shape(
                "filter_forward",
                format!("{steps} frames, need more than {l} and at least {}", c.t_ic),
            ));
        }
        let mut draw = |shape: Vec<usize>| match &mut sampling {
            Sampling::Random(rng) => gaussian_noise(*rng, shape),
            Sampling::Mean => Tensor::zeros(shape),
        };
        let u = if c.condition_encoder_on_u {
            Some(t.constant(one_hot(env, c.envs)?)?)
        } else {
            None
        };
        let r = (0..steps)
            .map(|s| self.embed(g, t.constant(frame(x, s))?).map_err(at_step(s)))
            .collect::<Result<Vec<_>>>()?;
        let initial = self.encode_initial(g, &r[..c.t_ic]).map_err(at_step(0))?;
        let (initial_eps, initial_sample) = self.reparameterize(g, initial, draw(vec![n, l * k]))?;
        let mut z: Vec<Var> = (0..l)
            .map(|j| t.slice(initial_sample, 1, j * k, (j + 1) * k))
            .collect::<Result<_>>()?;
        let mut h = t.constant(Tensor::zeros(vec![n, c.hidden]))?;
        let mut noise = Vec::with_capacity(steps - l);
        for (step, &r_t) in r.iter().enumerate() {
            if step < l {
                h = self.noise_gru.step(g, r_t, h).map_err(at_step(step))?;
                continue;
            }
            let history = t.concat(&z[step - l..step], 1)?;
            let (params, h_new) = self
                .encode_noise_step(g, h, r_t, history, u)
                .map_err(at_step(step))?;
            h = h_new;
            let (eps, sample) = self.reparameterize(g, params, draw(vec![n, k]))?;
            z.push(self.transition(g, history, sample).map_err(at_step(step))?);
            noise.push(NoiseStep {
                params,
                eps,
                sample,
                history,
            });
        }
        let x_hat = z
            .iter()
            .enumerate()
            .map(|(s, &zs)| self.decode(g, zs).map_err(at_step(s)))
            .collect::<Result<Vec<_>>>()?;
        Ok(PosteriorTrace {
            initial,
            initial_eps,
            initial_sample,
            noise,
            z,
            x_hat,
        })
    }

    /// Posterior-mean trace values without gradients, processed in chunks.
    pub fn posterior_means(&self, x: &Tensor, env: &[usize]) -> Result<TraceValues> {
        let n = x.shape()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(n);
            let xs = select_rows(x, start, end);
            let tape = Tape::new();
            let g = Graph::frozen(&tape, &self.store);
            let tr = self.filter_forward::<rand_chacha::ChaCha8Rng>(&g, &xs, &env[start..end], Sampling::Mean)?;
            parts.push(tr.values(&tape)?);
        }
        Ok(TraceValues::concat(&parts))
    }

    fn sample_prior<R: Rng>(&self, env: &[usize], temperature: f64, rng: &mut R) -> Result<Tensor> {
        let n = env.len();
        let base = gaussian_noise(rng, vec![n, self.k()]).map(|v| v * temperature);
        match &self.prior {
            None => Ok(base),
            Some(prior) => {
                let tape = Tape::new();
                let g = Graph::frozen(&tape, &self.store);
                let u = tape.constant(one_hot(env, self.config.envs)?)?;
                let (s, _) = prior.transform(&g, tape.constant(base)?, u)?;
                tape.value(s)
            }
        }
    }

    /// Generative rollout from a history `[N, L·K]`. Noise comes from the
    /// prior with base draws scaled by `temperature` (0 gives the
    /// deterministic path through the prior's median).
    pub fn rollout(
        &self,
        z_hist: &Tensor,
        env: &[usize],
        horizon: usize,
        n_samples: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Rollout> {
        let (k, d, lk) = (self.k(), self.config.d, self.config.history_width());
        let n = env.len();
        if z_hist.shape() != [n, lk] {
            return Err(Error::shape(
                "rollout",
                format!("history {:?} for {n} sequences of width {lk}", z_hist.shape()),
            ));
        }
        let mut x = vec![0.0; n * n_samples * horizon * d];
        let mut z = vec![0.0; n * n_samples * horizon * k];
        let rows: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n_samples).map(move |s| (i, s))).collect();
        for (chunk_id, chunk) in rows.chunks(INFERENCE_CHUNK).enumerate() {
            let mut rng = rng_for(seed, &[tag("rollout"), chunk_id as u64]);
            let m = chunk.len();
            let chunk_env: Vec<usize> = chunk.iter().map(|&(i, _)| env[i]).collect();
            let mut hist = Vec::with_capacity(m * lk);
            for &(i, _) in chunk {
                hist.extend_from_slice(&z_hist.data()[i * lk..(i + 1) * lk]);
            }
            let mut hist = Tensor::from_parts(vec![m, lk], hist);
            for step in 0..horizon {
                let s = self.sample_prior(&chunk_env, temperature, &mut rng)?;
                let tape = Tape::new();
                let g = Graph::frozen(&tape, &self.store);
                let zn = self
                    .transition(&g, tape.constant(hist.clone())?, tape.constant(s)?)
                    .map_err(at_step(step))?;
                let xn = tape.value(self.decode(&g, zn)?)?;
                let zn = tape.value(zn)?;
                for (row, &(i, smp)) in chunk.iter().enumerate() {
                    let base = (i * n_samples + smp) * horizon + step;
                    x[base * d..(base + 1) * d].copy_from_slice(&xn.data()[row * d..(row + 1) * d]);
                    z[base * k..(base + 1) * k].copy_from_slice(&zn.data()[row * k..(row + 1) * k]);
                }
                let mut next = Vec::with_capacity(m * lk);
                for row in 0..m {
                    next.extend_from_slice(&hist.data()[row * lk + k..(row + 1) * lk]);
                    next.extend_from_slice(&zn.data()[row * k..(row + 1) * k]);
                }
                hist = Tensor::from_parts(vec![m, lk], next);
            }
        }
        Ok(Rollout::new(
            Tensor::from_parts(vec![n, n_samples, horizon, d], x),
            Tensor::from_parts(vec![n, n_samples, horizon, k], z),
        ))
    }
}

/// Rows processed per tape in inference passes.
pub const INFERENCE_CHUNK: usize = 2048;

fn select_rows(x: &Tensor, start: usize, end: usize) -> Tensor {
    let per: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = end - start;
    Tensor::from_parts(shape, x.data()[start * per..end * per].to_vec())
}

impl PosteriorTrace {
    pub fn values(&self, tape: &Tape) -> Result<TraceValues> {
        let vals = |vs: &[Var]| vs.iter().map(|&v| tape.value(v)).collect::<Result<Vec<_>>>();
        let s: Vec<Var> = self.noise.iter().map(|n| n.sample).collect();
        let s_mean: Vec<Var> = self.noise.iter().map(|n| n.params.mean).collect();
        Ok(TraceValues {
            z: stack_frames(&vals(&self.z)?),
            s: stack_frames(&vals(&s)?),
            s_mean: stack_frames(&vals(&s_mean)?),
            x_hat: stack_frames(&vals(&self.x_hat)?),
            initial: self.initial.values(tape)?,
        })
    }
}

impl TraceValues {
    fn concat(parts: &[TraceValues]) -> TraceValues {
        let cat = |f: &dyn Fn(&TraceValues) -> &Tensor| {
            let first = f(&parts[0]);
            let mut shape = first.shape().to_vec();
            shape[0] = parts.iter().map(|p| f(p).shape()[0]).sum();
            let data = parts.iter().flat_map(|p| f(p).data().iter().copied()).collect();
            Tensor::from_parts(shape, data)
        };
        TraceValues {
            z: cat(&|p| &p.z),
            s: cat(&|p| &p.s),
            s_mean: cat(&|p| &p.s_mean),
            x_hat: cat(&|p| &p.x_hat),
            initial: GaussianParams {
                mean: cat(&|p| &p.initial.mean),
                log_variance: cat(&|p| &p.initial.log_variance),
            },
        }
    }
}

/// Sampled trajectories with per-step statistics across samples.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// `[N, S, H, D]`.
    pub x: Tensor,
    /// `[N, S, H, K]`.
    pub z: Tensor,
    /// `[N, H, D]`.
    pub mean: Tensor,
    /// Sample standard deviation, `[N, H, D]`; zero for a single sample.
    pub std: Tensor,
}

impl Rollout {
    pub fn new(x: Tensor, z: Tensor) -> Rollout {
        let (n, s, h, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut mean = vec![0.0; n * h * d];
        let mut std = vec![0.0; n * h * d];
        for i in 0..n {
            for step in 0..h {
                for j in 0..d {
                    let at = |smp: usize| x.data()[((i * s + smp) * h + step) * d + j];
                    let m = (0..s).map(at).sum::<f64>() / s.max(1) as f64;
                    let var = if s > 1 {
                        (0..s).map(|smp| (at(smp) - m).powi(2)).sum::<f64>() / (s - 1) as f64
                    } else {
                        0.0
                    };
                    mean[(i * h + step) * d + j] = m;
                    std[(i * h + step) * d + j] = var.sqrt();
                }
            }
        }
        Rollout {
            mean: Tensor::from_parts(vec![n, h, d], mean),
            std: Tensor::from_parts(vec![n, h, d], std),
            x,
            z,
        }
    }

    pub fn samples(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.x.shape()[2]
    }
}
