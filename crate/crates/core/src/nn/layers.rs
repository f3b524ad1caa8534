use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Graph, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Negative slope of every leaky-ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

fn glorot_uniform<R: Rng>(rng: &mut R, out: usize, inp: usize) -> Tensor {
    let a = (6.0 / (inp + out) as f64).sqrt();
    let data = (0..out * inp).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::from_parts(vec![out, inp], data)
}

/// Random orthogonal `n x n` matrix (QR of a Gaussian matrix, signs fixed
/// so the distribution is uniform).
pub(crate) fn orthogonal<R: Rng>(rng: &mut R, n: usize) -> Tensor {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
            data[i * n + j] = q[(i, j)] * sign;
        }
    }
    Tensor::from_parts(vec![n, n], data)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            glorot_uniform(rng, out_features, in_features),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(vec![out_features]));
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let shape = g.tape().shape(x)?;
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(Error::shape(
                "linear",
                format!("expected [batch, {}], got {:?}", self.in_features, shape),
            ));
        }
        g.tape().linear(x, g.param(self.weight)?, Some(g.param(self.bias)?))
    }
}

/// Affine layers joined by leaky-ReLU; the last layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every extent from input to output, e.g. `[8, 64, 64, 8]`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: &str, widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an Mlp needs at least an input and an output width");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), group, w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_features(&self) -> usize {
        self.layers[0].in_features
    }

    pub fn out_features(&self) -> usize {
        self.layers.last().map(|l| l.out_features).unwrap_or(0)
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.tape().leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }
}

/// Gated recurrent unit.
///
/// Gate order in the fused matrices is update, reset, candidate.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden_gates: ParamId,
    pub w_hidden_candidate: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        let h = hidden_size;
        let mut w_in = Vec::with_capacity(3 * h * input_size);
        for _ in 0..3 {
            w_in.extend(glorot_uniform(rng, h, input_size).into_data());
        }
        let mut w_gates = orthogonal(rng, h).into_data();
        w_gates.extend(orthogonal(rng, h).into_data());
        let w_cand = orthogonal(rng, h);
        GruCell {
            w_input: store.add(
                format!("{name}.w_input"),
                group,
                Tensor::from_parts(vec![3 * h, input_size], w_in),
            ),
            w_hidden_gates: store.add(
                format!("{name}.w_hidden_gates"),
                group,
                Tensor::from_parts(vec![2 * h, h], w_gates),
            ),
            w_hidden_candidate: store.add(format!("{name}.w_hidden_candidate"), group, w_cand),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(vec![3 * h])),
            input_size,
            hidden_size,
        }
    }

    /// One step of the recurrence:
    /// `z = σ(Wz x + Uz h + bz)`, `r = σ(Wr x + Ur h + br)`,
    /// `ĥ = tanh(Wh x + Uh (r ⊙ h) + bh)`, `h' = (1 − z) ⊙ h + z ⊙ ĥ`.
    pub fn step(&self, g: &Graph, x: Var, h: Var) -> Result<Var> {
        let t = g.tape();
        let (xs, hs) = (t.shape(x)?, t.shape(h)?);
        let nh = self.hidden_size;
        if xs.len() != 2 || xs[1] != self.input_size || hs.len() != 2 || hs[1] != nh || hs[0] != xs[0] {
            return Err(Error::shape(
                "gru_step",
                format!("input {xs:?}, hidden {hs:?} for cell {}->{}", self.input_size, nh),
            ));
        }
        let gx = t.linear(x, g.param(self.w_input)?, Some(g.param(self.bias)?))?;
        let gh = t.linear(h, g.param(self.w_hidden_gates)?, None)?;
        let update = t.sigmoid(t.add(t.slice(gx, 1, 0, nh)?, t.slice(gh, 1, 0, nh)?)?)?;
        let reset = t.sigmoid(t.add(t.slice(gx, 1, nh, 2 * nh)?, t.slice(gh, 1, nh, 2 * nh)?)?)?;
        let rh = t.mul(reset, h)?;
        let cand_h = t.linear(rh, g.param(self.w_hidden_candidate)?, None)?;
        let cand = t.tanh(t.add(t.slice(gx, 1, 2 * nh, 3 * nh)?, cand_h)?)?;
        // h + z ⊙ (ĥ − h)
        let delta = t.sub(cand, h)?;
        t.add(h, t.mul(update, delta)?)
    }
}
