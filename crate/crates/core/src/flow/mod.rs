//! Conditional one-dimensional spline flows used as noise priors `p(s | u)`.
//!
//! Each latent noise dimension gets its own rational-quadratic spline whose
//! parameters come from a shared conditioner on `u`. The base density is a
//! standard normal, and the prior factorizes over dimensions.

mod spline;

pub use spline::{raw_len, RqSpline, SplineLimits};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, Mlp, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use spline::{Direction, SplineOp};

/// `0.5 ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub bins: usize,
    pub bound: f64,
    pub min_bin: f64,
    pub min_derivative: f64,
    /// Width of the linear embedding of `u`.
    pub context_dim: usize,
    /// Hidden widths of the head mapping the context to spline parameters.
    pub head_hidden: Vec<usize>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let l = SplineLimits::default();
        FlowConfig {
            bins: 8,
            bound: l.bound,
            min_bin: l.min_bin,
            min_derivative: l.min_derivative,
            context_dim: 32,
            head_hidden: vec![],
        }
    }
}

impl FlowConfig {
    pub fn limits(&self) -> SplineLimits {
        SplineLimits {
            bound: self.bound,
            min_bin: self.min_bin,
            min_derivative: self.min_derivative,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.limits().validate(self.bins)?;
        if self.context_dim == 0 || self.head_hidden.contains(&0) {
            return Err(Error::Config("flow layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowInit {
    /// Every spline starts as the identity map for every `u`.
    Identity,
    /// Random conditioner output; splines differ across `u`.
    Random,
}

/// Maps `u` to the raw parameters of all `K` splines.
///
/// The per-dimension heads are fused into one network whose output is split
/// into `K` blocks of `3B + 1` values.
#[derive(Clone, Debug)]
pub struct ConditionerNet {
    pub embed: Linear,
    pub head: Mlp,
    pub dims: usize,
    pub bins: usize,
}

impl ConditionerNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        u_dim: usize,
        dims: usize,
        cfg: &FlowConfig,
        init: FlowInit,
        rng: &mut R,
    ) -> Self {
        let p = raw_len(cfg.bins);
        let embed = Linear::new(store, &format!("{name}.embed"), group, u_dim, cfg.context_dim, rng);
        let mut widths = vec![cfg.context_dim];
        widths.extend(&cfg.head_hidden);
        widths.push(dims * p);
        let head = Mlp::new(store, &format!("{name}.head"), group, &widths, rng);
        let last = head.layers.last().expect("head has a layer");
        let identity = cfg.limits().identity_raw(cfg.bins);
        let bias = store.value_mut(last.bias);
        for k in 0..dims {
            bias.data_mut()[k * p..(k + 1) * p].copy_from_slice(&identity);
        }
        match init {
            FlowInit::Identity => store.value_mut(last.weight).data_mut().fill(0.0),
            FlowInit::Random => {
                for b in store.value_mut(last.bias).data_mut() {
                    *b += rng.gen_range(-1.0..1.0);
                }
                for w in store.value_mut(last.weight).data_mut() {
                    *w *= 4.0;
                }
            }
        }
        ConditionerNet {
            embed,
            head,
            dims,
            bins: cfg.bins,
        }
    }

    pub fn u_dim(&self) -> usize {
        self.embed.in_features
    }

    /// Raw spline parameters `[N, K, 3B + 1]`.
    pub fn forward(&self, g: &Graph, u: Var) -> Result<Var> {
        let n = g.tape().shape(u)?[0];
        let ctx = self.embed.forward(g, u)?;
        let raw = self.head.forward(g, ctx)?;
        g.tape().reshape(raw, &[n, self.dims, raw_len(self.bins)])
    }
}

#[derive(Clone, Debug)]
pub struct NoisePrior {
    pub conditioner: ConditionerNet,
    pub limits: SplineLimits,
}

impl NoisePrior {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        u_dim: usize,
        dims: usize,
        cfg: &FlowConfig,
        init: FlowInit,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(NoisePrior {
            conditioner: ConditionerNet::new(store, name, group, u_dim, dims, cfg, init, rng),
            limits: cfg.limits(),
        })
    }

    pub fn dims(&self) -> usize {
        self.conditioner.dims
    }

    pub fn bins(&self) -> usize {
        self.conditioner.bins
    }

    fn op(&self, direction: Direction) -> SplineOp {
        SplineOp {
            bins: self.bins(),
            limits: self.limits,
            direction,
        }
    }

    fn apply(&self, g: &Graph, v: Var, u: Var, direction: Direction) -> Result<(Var, Var)> {
        let t = g.tape();
        let shape = t.shape(v)?;
        let (n, k) = (shape[0], self.dims());
        if shape.len() != 2 || k != shape[1] || t.shape(u)? != [n, self.conditioner.u_dim()] {
            return Err(Error::shape(
                "noise_prior",
                format!("values {:?} with u of shape {:?}", shape, t.shape(u)?),
            ));
        }
        let raw = self.conditioner.forward(g, u)?;
        let op = self.op(direction);
        let out = t.with_value(v, |vv| t.with_value(raw, |rv| op.apply(vv, rv)))???;
        let out = t.custom(Box::new(op), &[v, raw], out)?;
        let first = t.reshape(t.slice(out, 0, 0, 1)?, &[n, k])?;
        let ld = t.reshape(t.slice(out, 0, 1, 2)?, &[n, k])?;
        Ok((first, ld))
    }

    /// `s = F(z; u)` and `log |dF/dz|`, both `[N, K]`.
    pub fn transform(&self, g: &Graph, z: Var, u: Var) -> Result<(Var, Var)> {
        self.apply(g, z, u, Direction::Forward)
    }

    /// `log p(s_k | u)` per dimension, `[N, K]`.
    pub fn log_prob_dims(&self, g: &Graph, s: Var, u: Var) -> Result<Var> {
        let t = g.tape();
        let (x, ld) = self.apply(g, s, u, Direction::Inverse)?;
        let base = t.add_scalar(t.scale(t.square(x)?, -0.5)?, -HALF_LN_2PI)?;
        t.add(base, ld)
    }

    /// `log p(s | u) = Σ_k log p(s_k | u)`, `[N]`.
    pub fn log_prob(&self, g: &Graph, s: Var, u: Var) -> Result<Var> {
        let lp = self.log_prob_dims(g, s, u)?;
        g.tape().sum_axis(lp, 1)
    }

    /// Evaluates `log p(s | u)` without recording gradients.
    pub fn log_prob_values(&self, store: &ParamStore, s: &Tensor, u: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let g = Graph::frozen(&tape, store);
        let lp = self.log_prob(&g, tape.constant(s.clone())?, tape.constant(u.clone())?)?;
        tape.data(lp)
    }

    /// Draws one sample per row of `u`, `[N, K]`.
    pub fn sample<R: Rng>(&self, store: &ParamStore, u: &Tensor, rng: &mut R) -> Result<Tensor> {
        let n = u.shape()[0];
        let z: Vec<f64> = (0..n * self.dims()).map(|_| rng.sample(StandardNormal)).collect();
        let tape = Tape::new();
        let g = Graph::frozen(&tape, store);
        let z = tape.constant(Tensor::new(vec![n, self.dims()], z)?)?;
        let (s, _) = self.transform(&g, z, tape.constant(u.clone())?)?;
        tape.value(s)
    }

    /// The splines of one conditioning row, one per dimension.
    pub fn splines(&self, store: &ParamStore, u_row: &[f64]) -> Result<Vec<RqSpline>> {
        let tape = Tape::new();
        let g = Graph::frozen(&tape, store);
        let u = tape.constant(Tensor::new(vec![1, u_row.len()], u_row.to_vec())?)?;
        let raw = tape.data(self.conditioner.forward(&g, u)?)?;
        let p = raw_len(self.bins());
        raw.chunks(p)
            .map(|r| RqSpline::from_raw(r, self.bins(), &self.limits))
            .collect()
    }
}

/// One-hot rows of width `width` for the given category indices.
pub fn one_hot(indices: &[usize], width: usize) -> Result<Tensor> {
    let mut data = vec![0.0; indices.len() * width];
    for (row, &i) in indices.iter().enumerate() {
        if i >= width {
            return Err(Error::domain("one_hot", format!("index {i} out of range for width {width}")));
        }
        data[row * width + i] = 1.0;
    }
    Tensor::new(vec![indices.len(), width], data)
}
