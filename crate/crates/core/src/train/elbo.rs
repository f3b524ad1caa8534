use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{one_hot, HALF_LN_2PI};
use crate::model::{PosteriorTrace, SsmVae};
use crate::nn::Graph;
use crate::tensor::{Tensor, Var};

/// Per-sequence ELBO pieces on the tape, each `[N]`.
#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    pub recon: Var,
    pub kl_initial: Var,
    pub kl_noise: Var,
    /// `recon − β (kl_initial + kl_noise)`, `[N]`.
    pub total: Var,
}

/// Batch means of the ELBO pieces.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl_initial: f64,
    pub kl_noise: f64,
    pub total: f64,
}

impl ElboVars {
    /// Scalar loss `−mean(total)`.
    pub fn loss(&self, g: &Graph) -> Result<Var> {
        let t = g.tape();
        t.neg(t.mean(self.total)?)
    }

    pub fn terms(&self, g: &Graph) -> Result<ElboTerms> {
        let t = g.tape();
        let mean = |v: Var| -> Result<f64> {
            let d = t.data(v)?;
            Ok(d.iter().sum::<f64>() / d.len() as f64)
        };
        let terms = ElboTerms {
            recon: mean(self.recon)?,
            kl_initial: mean(self.kl_initial)?,
            kl_noise: mean(self.kl_noise)?,
            total: mean(self.total)?,
        };
        for (name, v) in [
            ("recon", terms.recon),
            ("kl_initial", terms.kl_initial),
            ("kl_noise", terms.kl_noise),
        ] {
            if !v.is_finite() {
                return Err(Error::numeric("elbo", format!("{name} is not finite")));
            }
        }
        Ok(terms)
    }
}

/// `Σ log N(x; μ, I)` over everything but the leading axis.
fn gaussian_log_lik(g: &Graph, x: Var, mean: Var) -> Result<Var> {
    let t = g.tape();
    let sq = t.square(t.sub(x, mean)?)?;
    let lp = t.add_scalar(t.scale(sq, -0.5)?, -HALF_LN_2PI)?;
    t.sum_axis(lp, 1)
}

/// `Σ_k log q(s_k)` at `s = μ + σ ε`, from `ε` and the log-variance.
fn posterior_log_density(g: &Graph, eps: Var, log_var: Var) -> Result<Var> {
    let t = g.tape();
    let lp = t.add(t.scale(t.square(eps)?, -0.5)?, t.scale(log_var, -0.5)?)?;
    t.sum_axis(t.add_scalar(lp, -HALF_LN_2PI)?, 1)
}

/// `KL(N(μ, σ²) ‖ N(0, I))` summed over dimensions.
pub fn kl_standard_normal(g: &Graph, mean: Var, log_var: Var) -> Result<Var> {
    let t = g.tape();
    let inner = t.sub(t.add(t.square(mean)?, t.exp(log_var)?)?, log_var)?;
    t.sum_axis(t.scale(t.add_scalar(inner, -1.0)?, 0.5)?, 1)
}

/// Single-sample estimates of `log q(s_t | ·) − log p(s_t | u)` per noise
/// step, each `[N]`.
pub fn kl_noise_terms(model: &SsmVae, g: &Graph, trace: &PosteriorTrace, env: &[usize]) -> Result<Vec<Var>> {
    let t = g.tape();
    let n = env.len();
    let steps = trace.noise.len();
    if steps == 0 {
        return Ok(vec![]);
    }
    let samples: Vec<Var> = trace.noise.iter().map(|s| s.sample).collect();
    let stacked = t.concat(&samples, 0)?;
    let log_p = match &model.prior {
        Some(prior) => {
            let envs: Vec<usize> = (0..steps).flat_map(|_| env.iter().copied()).collect();
            let u = t.constant(one_hot(&envs, model.config.envs)?)?;
            prior.log_prob(g, stacked, u)?
        }
        None => {
            let lp = t.add_scalar(t.scale(t.square(stacked)?, -0.5)?, -HALF_LN_2PI)?;
            t.sum_axis(lp, 1)?
        }
    };
    trace
        .noise
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let log_q = posterior_log_density(g, step.eps, step.params.log_var)?;
            t.sub(log_q, t.slice(log_p, 0, i * n, (i + 1) * n)?)
        })
        .collect()
}

/// ELBO of a filtering pass over standardized observations `x` `[N, T, D]`.
pub fn elbo(model: &SsmVae, g: &Graph, trace: &PosteriorTrace, x: &Tensor, env: &[usize], beta: f64) -> Result<ElboVars> {
    let t = g.tape();
    if x.shape()[1] != trace.x_hat.len() {
        return Err(Error::shape("elbo", "trace and observations cover different frames"));
    }
    let x_hat = t.concat(&trace.x_hat, 1)?;
    let n = x.shape()[0];
    let x = t.constant(x.reshape(vec![n, x.shape()[1] * x.shape()[2]])?)?;
    let recon = gaussian_log_lik(g, x, x_hat)?;
    let kl_initial = kl_standard_normal(g, trace.initial.mean, trace.initial.log_var)?;
    let mut kl_noise = t.constant(Tensor::zeros(vec![n]))?;
    for term in kl_noise_terms(model, g, trace, env)? {
        kl_noise = t.add(kl_noise, term)?;
    }
    let kl = t.add(kl_initial, kl_noise)?;
    let total = t.sub(recon, t.scale(kl, beta)?)?;
    Ok(ElboVars {
        recon,
        kl_initial,
        kl_noise,
        total,
    })
}
