//! Monotone rational-quadratic splines on `[-bound, bound]` with linear tails.
//!
//! Inside bin `k` with knots `(x_k, y_k)`, width `w`, height `h`, slope
//! `s = h / w`, boundary derivatives `d0, d1` and `ξ = (x - x_k) / w`:
//!
//! ```text
//! y = y_k + h (s ξ² + d0 ξ (1-ξ)) / (s + (d0 + d1 - 2s) ξ (1-ξ))
//! ```
//!
//! Outside the interval the map continues linearly with the boundary
//! derivative, so it stays C¹ and a bijection of the real line.

use std::ops::{Add, Div, Mul, Sub};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, CustomOp, Tensor};

/// Number of raw conditioner outputs for `bins` bins: widths, heights and
/// the `bins + 1` knot derivatives (both boundaries included).
pub fn raw_len(bins: usize) -> usize {
    3 * bins + 1
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplineLimits {
    pub bound: f64,
    /// Smallest width or height as a fraction of the interval.
    pub min_bin: f64,
    pub min_derivative: f64,
}

impl Default for SplineLimits {
    fn default() -> Self {
        SplineLimits {
            bound: 4.0,
            min_bin: 1e-3,
            min_derivative: 1e-3,
        }
    }
}

impl SplineLimits {
    pub fn validate(&self, bins: usize) -> Result<()> {
        if bins == 0 {
            return Err(Error::Spline("at least one bin is required".into()));
        }
        if !(self.bound.is_finite() && self.bound > 0.0) {
            return Err(Error::Spline(format!("interval bound must be positive, got {}", self.bound)));
        }
        if !(self.min_bin >= 0.0 && self.min_bin * (bins as f64) < 1.0) {
            return Err(Error::Spline(format!(
                "minimum bin fraction {} is infeasible for {} bins",
                self.min_bin, bins
            )));
        }
        if !(self.min_derivative.is_finite() && self.min_derivative >= 0.0) {
            return Err(Error::Spline(format!("minimum derivative {}", self.min_derivative)));
        }
        Ok(())
    }

    /// Raw derivative value that maps to a unit knot derivative.
    pub fn identity_raw_derivative(&self) -> f64 {
        ((1.0 - self.min_derivative).exp() - 1.0).ln()
    }

    /// Raw parameters of the identity spline.
    pub fn identity_raw(&self, bins: usize) -> Vec<f64> {
        let mut raw = vec![0.0; raw_len(bins)];
        raw[2 * bins..].fill(self.identity_raw_derivative());
        raw
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RqSpline {
    bound: f64,
    xk: Vec<f64>,
    yk: Vec<f64>,
    d: Vec<f64>,
}

impl RqSpline {
    /// Builds a spline from bin widths, bin heights and the `B + 1` knot
    /// derivatives. Widths and heights must be positive and each sum to
    /// `2 * bound`.
    pub fn new(bound: f64, widths: &[f64], heights: &[f64], derivatives: &[f64]) -> Result<Self> {
        let b = widths.len();
        if b == 0 || heights.len() != b || derivatives.len() != b + 1 {
            return Err(Error::Spline(format!(
                "need B widths, B heights and B+1 derivatives, got {}, {}, {}",
                widths.len(),
                heights.len(),
                derivatives.len()
            )));
        }
        if !(bound.is_finite() && bound > 0.0) {
            return Err(Error::Spline(format!("interval bound must be positive, got {bound}")));
        }
        for (what, v) in [("width", widths), ("height", heights), ("derivative", derivatives)] {
            if let Some(bad) = v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                return Err(Error::Spline(format!("{what} {bad} is not positive and finite")));
            }
        }
        for (what, v) in [("widths", widths), ("heights", heights)] {
            let total: f64 = v.iter().sum();
            if (total - 2.0 * bound).abs() > 1e-9 * bound.max(1.0) {
                return Err(Error::Spline(format!("{what} sum to {total}, expected {}", 2.0 * bound)));
            }
        }
        Ok(RqSpline {
            bound,
            xk: knots(bound, widths),
            yk: knots(bound, heights),
            d: derivatives.to_vec(),
        })
    }

    /// Builds a spline from unconstrained parameters (see [`raw_len`]).
    pub fn from_raw(raw: &[f64], bins: usize, limits: &SplineLimits) -> Result<Self> {
        limits.validate(bins)?;
        if raw.len() != raw_len(bins) {
            return Err(Error::Spline(format!(
                "{} raw values for {} bins, expected {}",
                raw.len(),
                bins,
                raw_len(bins)
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Spline("non-finite raw parameter".into()));
        }
        let mut r = RawSpline::new(bins, *limits);
        r.set(raw);
        Ok(r.spline)
    }

    pub fn identity(bins: usize, bound: f64) -> Result<Self> {
        let w = vec![2.0 * bound / bins as f64; bins];
        RqSpline::new(bound, &w, &w, &vec![1.0; bins + 1])
    }

    pub fn bins(&self) -> usize {
        self.d.len() - 1
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn x_knots(&self) -> &[f64] {
        &self.xk
    }

    pub fn y_knots(&self) -> &[f64] {
        &self.yk
    }

    pub fn derivatives(&self) -> &[f64] {
        &self.d
    }

    /// `(y, log dy/dx)`.
    pub fn forward(&self, x: f64) -> (f64, f64) {
        match locate(&self.xk, x) {
            Loc::Below => (self.yk[0] + self.d[0] * (x - self.xk[0]), self.d[0].ln()),
            Loc::Above => {
                let b = self.bins();
                (self.yk[b] + self.d[b] * (x - self.xk[b]), self.d[b].ln())
            }
            Loc::Bin(k) => {
                let bin = self.bin(k);
                let (y, dydx) = bin.eval(x);
                (y, dydx.ln())
            }
        }
    }

    /// `(x, log dx/dy)`; exact inverse of [`RqSpline::forward`].
    pub fn inverse(&self, y: f64) -> (f64, f64) {
        let b = self.bins();
        match locate(&self.yk, y) {
            Loc::Below => (self.xk[0] + (y - self.yk[0]) / self.d[0], -self.d[0].ln()),
            Loc::Above => (self.xk[b] + (y - self.yk[b]) / self.d[b], -self.d[b].ln()),
            Loc::Bin(k) => {
                let bin = self.bin(k);
                let x = bin.solve(y);
                (x, -bin.eval(x).1.ln())
            }
        }
    }

    fn bin(&self, k: usize) -> Bin {
        Bin {
            xk: self.xk[k],
            w: self.xk[k + 1] - self.xk[k],
            yk: self.yk[k],
            h: self.yk[k + 1] - self.yk[k],
            d0: self.d[k],
            d1: self.d[k + 1],
        }
    }
}

fn knots(bound: f64, extents: &[f64]) -> Vec<f64> {
    let mut k = Vec::with_capacity(extents.len() + 1);
    let mut acc = -bound;
    k.push(acc);
    for e in &extents[..extents.len() - 1] {
        acc += e;
        k.push(acc);
    }
    // pin the last knot so rounding never moves the interval edge
    k.push(bound);
    k
}

enum Loc {
    Below,
    Above,
    Bin(usize),
}

fn locate(knots: &[f64], v: f64) -> Loc {
    let b = knots.len() - 1;
    if v < knots[0] {
        Loc::Below
    } else if v > knots[b] {
        Loc::Above
    } else {
        // last knot <= v, clamped to a valid bin
        let k = knots.partition_point(|&t| t <= v).saturating_sub(1);
        Loc::Bin(k.min(b - 1))
    }
}

struct Bin {
    xk: f64,
    w: f64,
    yk: f64,
    h: f64,
    d0: f64,
    d1: f64,
}

impl Bin {
    fn eval(&self, x: f64) -> (f64, f64) {
        let s = self.h / self.w;
        let xi = (x - self.xk) / self.w;
        let om = xi * (1.0 - xi);
        let den = s + (self.d0 + self.d1 - 2.0 * s) * om;
        let y = self.yk + self.h * (s * xi * xi + self.d0 * om) / den;
        let dydx =
            s * s * (self.d1 * xi * xi + 2.0 * s * om + self.d0 * (1.0 - xi) * (1.0 - xi)) / (den * den);
        (y, dydx)
    }

    /// Root of the quadratic in ξ that lies in [0, 1].
    fn solve(&self, y: f64) -> f64 {
        let s = self.h / self.w;
        let dy = y - self.yk;
        let t = self.d0 + self.d1 - 2.0 * s;
        let a = self.h * (s - self.d0) + dy * t;
        let b = self.h * self.d0 - dy * t;
        let c = -s * dy;
        let disc = (b * b - 4.0 * a * c).max(0.0);
        let xi = (2.0 * c) / (-b - disc.sqrt());
        let xi = if xi.is_finite() { xi.clamp(0.0, 1.0) } else { 0.0 };
        self.xk + xi * self.w
    }
}

/// Spline built from raw parameters, keeping what the chain rule needs.
pub(crate) struct RawSpline {
    pub(crate) spline: RqSpline,
    limits: SplineLimits,
    pw: Vec<f64>,
    ph: Vec<f64>,
    dsig: Vec<f64>,
}

impl RawSpline {
    pub(crate) fn new(bins: usize, limits: SplineLimits) -> Self {
        RawSpline {
            spline: RqSpline {
                bound: limits.bound,
                xk: vec![0.0; bins + 1],
                yk: vec![0.0; bins + 1],
                d: vec![0.0; bins + 1],
            },
            limits,
            pw: vec![0.0; bins],
            ph: vec![0.0; bins],
            dsig: vec![0.0; bins + 1],
        }
    }

    fn bins(&self) -> usize {
        self.pw.len()
    }

    /// Extent scale shared by widths and heights: `2T (1 - B m)`.
    fn extent_scale(&self) -> f64 {
        2.0 * self.limits.bound * (1.0 - self.limits.min_bin * self.bins() as f64)
    }

    pub(crate) fn set(&mut self, raw: &[f64]) {
        let b = self.bins();
        let t = self.limits.bound;
        let floor = 2.0 * t * self.limits.min_bin;
        let scale = self.extent_scale();
        softmax(&raw[..b], &mut self.pw);
        softmax(&raw[b..2 * b], &mut self.ph);
        fill_knots(&self.pw, floor, scale, t, &mut self.spline.xk);
        fill_knots(&self.ph, floor, scale, t, &mut self.spline.yk);
        for j in 0..=b {
            let r = raw[2 * b + j];
            self.spline.d[j] = self.limits.min_derivative + softplus(r);
            self.dsig[j] = sigmoid(r);
        }
    }

    /// Value, log-derivative and their partials with respect to the input
    /// `x` and every raw parameter. `bin` forces the bin used (the inverse
    /// locates it from `y`).
    pub(crate) fn jet(&self, x: f64, bin: Option<usize>, out: &mut Jet) {
        let b = self.bins();
        let sp = &self.spline;
        out.clear();
        let loc = match bin {
            Some(k) => Loc::Bin(k),
            None => locate(&sp.xk, x),
        };
        match loc {
            Loc::Below | Loc::Above => {
                let j = if matches!(loc, Loc::Below) { 0 } else { b };
                let off = x - sp.xk[j];
                out.y = sp.yk[j] + sp.d[j] * off;
                out.ld = sp.d[j].ln();
                out.dy_dx = sp.d[j];
                out.dld_dx = 0.0;
                out.dy_draw[2 * b + j] = off * self.dsig[j];
                out.dld_draw[2 * b + j] = self.dsig[j] / sp.d[j];
            }
            Loc::Bin(k) => {
                let v = |i: usize, val: f64| D7::var(val, i);
                let xk = v(1, sp.xk[k]);
                let w = v(2, sp.xk[k + 1] - sp.xk[k]);
                let yk = v(3, sp.yk[k]);
                let h = v(4, sp.yk[k + 1] - sp.yk[k]);
                let d0 = v(5, sp.d[k]);
                let d1 = v(6, sp.d[k + 1]);
                let xv = v(0, x);
                let s = h / w;
                let xi = (xv - xk) / w;
                let one = D7::cst(1.0);
                let om = xi * (one - xi);
                let den = s + (d0 + d1 - s * 2.0) * om;
                let y = yk + h * (s * xi * xi + d0 * om) / den;
                let num = s * s * (d1 * xi * xi + s * om * 2.0 + d0 * (one - xi) * (one - xi));
                let ld = num.ln() - den.ln() * 2.0;
                out.y = y.v;
                out.ld = ld.v;
                out.dy_dx = y.d[0];
                out.dld_dx = ld.d[0];
                let scale = self.extent_scale();
                chain_extents(&self.pw, scale, k, y.d[1], y.d[2], &mut out.dy_draw[..b]);
                chain_extents(&self.pw, scale, k, ld.d[1], ld.d[2], &mut out.dld_draw[..b]);
                chain_extents(&self.ph, scale, k, y.d[3], y.d[4], &mut out.dy_draw[b..2 * b]);
                chain_extents(&self.ph, scale, k, ld.d[3], ld.d[4], &mut out.dld_draw[b..2 * b]);
                out.dy_draw[2 * b + k] = y.d[5] * self.dsig[k];
                out.dy_draw[2 * b + k + 1] = y.d[6] * self.dsig[k + 1];
                out.dld_draw[2 * b + k] = ld.d[5] * self.dsig[k];
                out.dld_draw[2 * b + k + 1] = ld.d[6] * self.dsig[k + 1];
            }
        }
    }
}

fn fill_knots(p: &[f64], floor: f64, scale: f64, bound: f64, knots: &mut [f64]) {
    let b = p.len();
    knots[0] = -bound;
    let mut acc = -bound;
    for k in 1..b {
        acc += floor + scale * p[k - 1];
        knots[k] = acc;
    }
    knots[b] = bound;
}

fn softmax(raw: &[f64], out: &mut [f64]) {
    let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, r) in out.iter_mut().zip(raw) {
        *o = (r - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Extent `e_j = floor + c p_j` with `p = softmax(raw)`; the knot below
/// bin `k` is `-T + Σ_{j<k} e_j`. Adds the raw-parameter gradient given the
/// partials with respect to that knot and to `e_k`.
fn chain_extents(p: &[f64], c: f64, k: usize, g_knot: f64, g_ext: f64, out: &mut [f64]) {
    let below: f64 = p[..k].iter().sum();
    for (i, o) in out.iter_mut().enumerate() {
        let in_below = if i < k { 1.0 } else { 0.0 };
        let is_k = if i == k { 1.0 } else { 0.0 };
        *o += c * (g_knot * p[i] * (in_below - below) + g_ext * p[k] * (is_k - p[i]));
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Jet {
    pub y: f64,
    pub ld: f64,
    pub dy_dx: f64,
    pub dld_dx: f64,
    pub dy_draw: Vec<f64>,
    pub dld_draw: Vec<f64>,
}

impl Jet {
    pub(crate) fn new(bins: usize) -> Self {
        Jet {
            y: 0.0,
            ld: 0.0,
            dy_dx: 0.0,
            dld_dx: 0.0,
            dy_draw: vec![0.0; raw_len(bins)],
            dld_draw: vec![0.0; raw_len(bins)],
        }
    }

    fn clear(&mut self) {
        self.dy_draw.fill(0.0);
        self.dld_draw.fill(0.0);
    }
}

/// Forward-mode number with seven tangents.
#[derive(Clone, Copy, Debug)]
struct D7 {
    v: f64,
    d: [f64; 7],
}

impl D7 {
    fn cst(v: f64) -> Self {
        D7 { v, d: [0.0; 7] }
    }

    fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 7];
        d[i] = 1.0;
        D7 { v, d }
    }

    fn ln(self) -> Self {
        let mut d = self.d;
        for t in &mut d {
            *t /= self.v;
        }
        D7 { v: self.v.ln(), d }
    }
}

impl Add for D7 {
    type Output = D7;
    fn add(self, o: D7) -> D7 {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        D7 { v: self.v + o.v, d }
    }
}

impl Sub for D7 {
    type Output = D7;
    fn sub(self, o: D7) -> D7 {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a -= b;
        }
        D7 { v: self.v - o.v, d }
    }
}

impl Mul for D7 {
    type Output = D7;
    fn mul(self, o: D7) -> D7 {
        let mut d = [0.0; 7];
        for (i, t) in d.iter_mut().enumerate() {
            *t = self.d[i] * o.v + self.v * o.d[i];
        }
        D7 { v: self.v * o.v, d }
    }
}

impl Mul<f64> for D7 {
    type Output = D7;
    fn mul(self, c: f64) -> D7 {
        let mut d = self.d;
        for t in &mut d {
            *t *= c;
        }
        D7 { v: self.v * c, d }
    }
}

impl Div for D7 {
    type Output = D7;
    fn div(self, o: D7) -> D7 {
        let inv = 1.0 / o.v;
        let q = self.v * inv;
        let mut d = [0.0; 7];
        for (i, t) in d.iter_mut().enumerate() {
            *t = (self.d[i] - q * o.d[i]) * inv;
        }
        D7 { v: q, d }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Direction {
    Forward,
    Inverse,
}

/// Elementwise spline over `[N, K]` values with per-element raw parameters
/// `[N, K, 3B+1]`. The output is `[2, N, K]`: transformed values, then log
/// absolute derivatives of the applied direction.
#[derive(Debug)]
pub(crate) struct SplineOp {
    pub bins: usize,
    pub limits: SplineLimits,
    pub direction: Direction,
}

impl SplineOp {
    pub(crate) fn apply(&self, values: &Tensor, raw: &Tensor) -> Result<Tensor> {
        let n = values.len();
        let p = raw_len(self.bins);
        if raw.len() != n * p {
            return Err(Error::shape(
                "spline",
                format!("{} values need {} raw parameters, got {}", n, n * p, raw.len()),
            ));
        }
        let mut rs = RawSpline::new(self.bins, self.limits);
        let mut out = vec![0.0; 2 * n];
        for (i, &v) in values.data().iter().enumerate() {
            rs.set(&raw.data()[i * p..(i + 1) * p]);
            let (a, ld) = match self.direction {
                Direction::Forward => rs.spline.forward(v),
                Direction::Inverse => rs.spline.inverse(v),
            };
            out[i] = a;
            out[n + i] = ld;
        }
        let mut shape = vec![2];
        shape.extend_from_slice(values.shape());
        Tensor::new(shape, out).map_err(|_| Error::numeric("spline", "non-finite spline output"))
    }
}

impl CustomOp for SplineOp {
    fn name(&self) -> &'static str {
        "rq_spline"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (values, raw) = (inputs[0], inputs[1]);
        let n = values.len();
        let p = raw_len(self.bins);
        let mut rs = RawSpline::new(self.bins, self.limits);
        let mut jet = Jet::new(self.bins);
        let mut g_val = vec![0.0; n];
        let mut g_raw = vec![0.0; n * p];
        for i in 0..n {
            let (gy, gl) = (grad[i], grad[n + i]);
            if gy == 0.0 && gl == 0.0 {
                continue;
            }
            rs.set(&raw.data()[i * p..(i + 1) * p]);
            let gr = &mut g_raw[i * p..(i + 1) * p];
            match self.direction {
                Direction::Forward => {
                    rs.jet(values.data()[i], None, &mut jet);
                    g_val[i] = gy * jet.dy_dx + gl * jet.dld_dx;
                    for j in 0..p {
                        gr[j] = gy * jet.dy_draw[j] + gl * jet.dld_draw[j];
                    }
                }
                Direction::Inverse => {
                    // x = F⁻¹(y; θ), ld = -log F'(x; θ); differentiate implicitly
                    let y = values.data()[i];
                    let x = output.data()[i];
                    let bin = match locate(&rs.spline.yk, y) {
                        Loc::Bin(k) => Some(k),
                        _ => None,
                    };
                    rs.jet(x, bin, &mut jet);
                    let dx_dy = 1.0 / jet.dy_dx;
                    g_val[i] = gy * dx_dy - gl * jet.dld_dx * dx_dy;
                    for j in 0..p {
                        let dx = -jet.dy_draw[j] * dx_dy;
                        let dld = -(jet.dld_draw[j] + jet.dld_dx * dx);
                        gr[j] = gy * dx + gl * dld;
                    }
                }
            }
        }
        vec![Some(g_val), Some(g_raw)]
    }
}
