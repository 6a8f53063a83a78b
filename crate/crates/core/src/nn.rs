//! Small dense feedforward networks with exact first derivatives and the one
//! mixed second derivative the fabric trainer needs.
//!
//! Every policy and encoder network is a [`DiffNet`]: an optional random
//! Fourier feature front end followed by fully connected layers. Besides the
//! value, a net answers three derivative queries:
//!
//! * [`DiffNet::param_grad`]: `∂(uᵀ f(x)) / ∂θ` for an upstream vector `u`;
//! * [`DiffNet::input_grad`]: `∂f(x) / ∂x` for scalar nets;
//! * [`DiffNet::mixed_second_order`]: `∂(vᵀ ∂ₓf(x)) / ∂θ` for scalar nets,
//!   computed by differentiating the forward-mode tangent pass in reverse.
//!
//! The Fourier front end is fixed at construction and never receives gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset added to shifted-ELU outputs so they are strictly positive.
pub const POSITIVE_EPS: f64 = 1e-6;

const MAGIC: &[u8; 5] = b"DNET1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Linear,
    /// `ELU(u) + 1 + POSITIVE_EPS`.
    PositiveElu,
}

#[inline]
fn elu(u: f64) -> (f64, f64, f64) {
    if u > 0.0 {
        (u, 1.0, 0.0)
    } else {
        let e = u.exp();
        (e - 1.0, e, e)
    }
}

/// Value, first and second derivative of the shifted ELU used for positive outputs.
#[inline]
pub fn positive_elu(u: f64) -> (f64, f64, f64) {
    let (v, d1, d2) = elu(u);
    (v + 1.0 + POSITIVE_EPS, d1, d2)
}

impl Activation {
    #[inline]
    fn eval(self, u: f64) -> (f64, f64, f64) {
        match self {
            Activation::Elu => elu(u),
            Activation::Relu => {
                if u > 0.0 {
                    (u, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
        }
    }
}

impl OutputActivation {
    #[inline]
    fn eval(self, u: f64) -> (f64, f64, f64) {
        match self {
            OutputActivation::Linear => (u, 1.0, 0.0),
            OutputActivation::PositiveElu => positive_elu(u),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffSpec {
    pub features: usize,
    /// Kernel bandwidth; frequencies are drawn with standard deviation `1/sigma`.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub n_in: usize,
    pub hidden: Vec<usize>,
    pub n_out: usize,
    pub hidden_act: Activation,
    pub output_act: OutputActivation,
    pub rff: Option<RffSpec>,
}

/// Random Fourier feature map `φ(x) = √(2/R) cos(Ωx + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rff {
    n_in: usize,
    features: usize,
    sigma: f64,
    seed: Option<u64>,
    omega: Vec<f64>,
    phase: Vec<f64>,
}

impl Rff {
    /// Draws `Ω ~ N(0, 1/σ²)` and `b ~ U[0, 2π)` from a ChaCha8 stream keyed by `seed`.
    pub fn from_seed(n_in: usize, features: usize, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma > 0.0) || features == 0 || n_in == 0 {
            return Err(Error::invalid("rff: need n_in > 0, features > 0 and sigma > 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / sigma).expect("valid normal");
        let omega: Vec<f64> = (0..features * n_in).map(|_| normal.sample(&mut rng)).collect();
        let phase: Vec<f64> = (0..features)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        Ok(Self {
            n_in,
            features,
            sigma,
            seed: Some(seed),
            omega,
            phase,
        })
    }

    /// Explicit frequencies (row-major `features × n_in`) and phases.
    pub fn with_params(n_in: usize, omega: Vec<f64>, phase: Vec<f64>, sigma: f64) -> Result<Self> {
        let features = phase.len();
        if omega.len() != features * n_in || features == 0 {
            return Err(Error::invalid("rff: omega must be features x n_in"));
        }
        Ok(Self {
            n_in,
            features,
            sigma,
            seed: None,
            omega,
            phase,
        })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn scale(&self) -> f64 {
        (2.0 / self.features as f64).sqrt()
    }

    fn angles(&self, x: &[f64]) -> Vec<f64> {
        (0..self.features)
            .map(|r| {
                let row = &self.omega[r * self.n_in..(r + 1) * self.n_in];
                dot(row, x) + self.phase[r]
            })
            .collect()
    }

    fn map(&self, x: &[f64]) -> Vec<f64> {
        let s = self.scale();
        self.angles(x).into_iter().map(|a| s * a.cos()).collect()
    }

    /// Features and their directional derivative along `v`.
    fn map_with_tangent(&self, x: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let s = self.scale();
        let mut phi = Vec::with_capacity(self.features);
        let mut dphi = Vec::with_capacity(self.features);
        for r in 0..self.features {
            let row = &self.omega[r * self.n_in..(r + 1) * self.n_in];
            let a = dot(row, x) + self.phase[r];
            phi.push(s * a.cos());
            dphi.push(-s * a.sin() * dot(row, v));
        }
        (phi, dphi)
    }

    /// Pulls a feature-space gradient back to input space.
    fn pullback(&self, x: &[f64], g_phi: &[f64]) -> Vec<f64> {
        let s = self.scale();
        let mut gx = vec![0.0; self.n_in];
        for (r, a) in self.angles(x).into_iter().enumerate() {
            let c = -s * a.sin() * g_phi[r];
            let row = &self.omega[r * self.n_in..(r + 1) * self.n_in];
            for (g, w) in gx.iter_mut().zip(row) {
                *g += c * w;
            }
        }
        gx
    }
}

/// `√(2/R)·cos(Ωx + b)`.
pub fn rff_features(x: &[f64], rff: &Rff) -> Result<Vec<f64>> {
    if x.len() != rff.n_in {
        return Err(Error::invalid(format!(
            "rff_features: input has length {}, expected {}",
            x.len(),
            rff.n_in
        )));
    }
    Ok(rff.map(x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out × n_in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(n_in: usize, n_out: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != n_in * n_out || bias.len() != n_out {
            return Err(Error::invalid("layer: weight/bias shapes do not match"));
        }
        Ok(Self {
            n_in,
            n_out,
            weights,
            bias,
        })
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|o| dot(&self.weights[o * self.n_in..(o + 1) * self.n_in], x) + self.bias[o])
            .collect()
    }

    fn apply_linear(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|o| dot(&self.weights[o * self.n_in..(o + 1) * self.n_in], x))
            .collect()
    }

    fn apply_transposed(&self, d: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_in];
        for (o, &dv) in d.iter().enumerate() {
            if dv == 0.0 {
                continue;
            }
            let row = &self.weights[o * self.n_in..(o + 1) * self.n_in];
            for (acc, w) in out.iter_mut().zip(row) {
                *acc += dv * w;
            }
        }
        out
    }
}

/// Four independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn accumulate_outer(&mut self, delta: &[f64], input: &[f64]) {
        let n_in = input.len();
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &mut self.weights[o * n_in..(o + 1) * n_in];
            for (g, x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
        }
    }
}

/// Parameter gradients laid out exactly like the network's trainable
/// parameters, plus an optional input gradient. The Fourier front end has no
/// entry here.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub layers: Vec<LayerGrad>,
    pub input: Option<Vec<f64>>,
}

impl GradBundle {
    pub fn zeros_for(net: &DiffNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            input: None,
        }
    }

    /// `self += s · other` over parameter entries.
    pub fn add_scaled(&mut self, other: &GradBundle, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += s * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += s * y;
            }
        }
    }

    /// Flattened in the same order as [`DiffNet::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.write_flat(&mut out);
        out
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|&v| v == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Intermediate values of one forward pass.
struct Tape {
    /// `acts[0]` is the (feature-mapped) input, `acts[l+1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffNet {
    n_in: usize,
    hidden_act: Activation,
    output_act: OutputActivation,
    rff: Option<Rff>,
    layers: Vec<Layer>,
}

impl DiffNet {
    /// Glorot-uniform weights, zero biases, fresh Fourier features.
    pub fn new<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Result<Self> {
        if spec.n_in == 0 || spec.n_out == 0 || spec.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("net spec: all layer sizes must be positive"));
        }
        let rff = match &spec.rff {
            Some(r) => Some(Rff::from_seed(spec.n_in, r.features, r.sigma, rng.random())?),
            None => None,
        };
        let first = rff.as_ref().map_or(spec.n_in, |r| r.features);
        let mut sizes = vec![first];
        sizes.extend_from_slice(&spec.hidden);
        sizes.push(spec.n_out);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Layer {
                    n_in: fan_in,
                    n_out: fan_out,
                    weights,
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            n_in: spec.n_in,
            hidden_act: spec.hidden_act,
            output_act: spec.output_act,
            rff,
            layers,
        })
    }

    /// Assembles a network from explicit layers, e.g. hand-set test fixtures.
    pub fn from_layers(
        n_in: usize,
        rff: Option<Rff>,
        layers: Vec<Layer>,
        hidden_act: Activation,
        output_act: OutputActivation,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("net needs at least one layer"));
        }
        let mut width = match &rff {
            Some(r) if r.n_in != n_in => {
                return Err(Error::invalid("rff input width does not match n_in"));
            }
            Some(r) => r.features,
            None => n_in,
        };
        for l in &layers {
            if l.n_in != width || l.weights.len() != l.n_in * l.n_out || l.bias.len() != l.n_out {
                return Err(Error::invalid("layer dimensions do not chain"));
            }
            width = l.n_out;
        }
        Ok(Self {
            n_in,
            hidden_act,
            output_act,
            rff,
            layers,
        })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn rff(&self) -> Option<&Rff> {
        self.rff.as_ref()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_act
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_act
    }

    /// Layer widths after the feature map: `[features, h1, ..., n_out]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].n_in];
        s.extend(self.layers.iter().map(|l| l.n_out));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Trainable parameters, layer by layer: weights (row-major) then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "set_params: got {} values, net has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_in {
            return Err(Error::invalid(format!(
                "net input has length {}, expected {}",
                x.len(),
                self.n_in
            )));
        }
        Ok(())
    }

    fn check_scalar(&self, op: &str) -> Result<()> {
        if self.n_out() != 1 {
            return Err(Error::invalid(format!(
                "{op} requires a scalar-output net (n_out = {})",
                self.n_out()
            )));
        }
        Ok(())
    }

    fn features(&self, x: &[f64]) -> Vec<f64> {
        match &self.rff {
            Some(r) => r.map(x),
            None => x.to_vec(),
        }
    }

    fn act(&self, layer: usize, u: f64) -> (f64, f64, f64) {
        if layer + 1 == self.layers.len() {
            self.output_act.eval(u)
        } else {
            self.hidden_act.eval(u)
        }
    }

    fn tape(&self, x: &[f64]) -> Tape {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(self.features(x));
        for (i, l) in self.layers.iter().enumerate() {
            let u = l.apply(acts.last().unwrap());
            let a = u.iter().map(|&v| self.act(i, v).0).collect();
            pre.push(u);
            acts.push(a);
        }
        Tape { acts, pre }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = self.features(x);
        for (i, l) in self.layers.iter().enumerate() {
            a = l.apply(&a).into_iter().map(|u| self.act(i, u).0).collect();
        }
        Ok(a)
    }

    /// Value plus full reverse pass for `upstreamᵀ f(x)`: parameter gradient and input gradient.
    pub fn value_and_backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, GradBundle)> {
        self.check_input(x)?;
        if upstream.len() != self.n_out() {
            return Err(Error::invalid("upstream length must equal n_out"));
        }
        let tape = self.tape(x);
        let mut grads = GradBundle::zeros_for(self);
        let last = self.layers.len() - 1;
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(&tape.pre[last])
            .map(|(g, &u)| g * self.output_act.eval(u).1)
            .collect();
        for l in (0..self.layers.len()).rev() {
            grads.layers[l].accumulate_outer(&delta, &tape.acts[l]);
            for (gb, d) in grads.layers[l].bias.iter_mut().zip(&delta) {
                *gb += d;
            }
            let mut back = self.layers[l].apply_transposed(&delta);
            if l > 0 {
                for (b, &u) in back.iter_mut().zip(&tape.pre[l - 1]) {
                    *b *= self.hidden_act.eval(u).1;
                }
            }
            delta = back;
        }
        let gx = match &self.rff {
            Some(r) => r.pullback(x, &delta),
            None => delta,
        };
        grads.input = Some(gx);
        let out = tape.acts.last().unwrap().clone();
        Ok((out, grads))
    }

    /// Gradient of `upstreamᵀ f(x)` w.r.t. every trainable parameter.
    pub fn param_grad(&self, x: &[f64], upstream: &[f64]) -> Result<GradBundle> {
        let (_, mut g) = self.value_and_backward(x, upstream)?;
        g.input = None;
        Ok(g)
    }

    /// `∂f/∂x` for a scalar net, including the Fourier feature map.
    pub fn input_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_scalar("input_grad")?;
        let (_, g) = self.value_and_backward(x, &[1.0])?;
        Ok(g.input.unwrap())
    }

    /// Parameter gradient of `vᵀ ∂ₓf(x)` for a scalar net.
    ///
    /// The directional derivative `vᵀ∂ₓf` is the output tangent of a
    /// forward-mode pass seeded with `v`; that tangent pass is then
    /// differentiated in reverse w.r.t. the weights.
    pub fn mixed_second_order(&self, x: &[f64], v: &[f64]) -> Result<GradBundle> {
        self.check_scalar("mixed_second_order")?;
        self.check_input(x)?;
        if v.len() != self.n_in {
            return Err(Error::invalid("direction must have length n_in"));
        }
        let (a0, t0) = match &self.rff {
            Some(r) => r.map_with_tangent(x, v),
            None => (x.to_vec(), v.to_vec()),
        };
        let n = self.layers.len();
        let mut acts = vec![a0];
        let mut tans = vec![t0];
        let mut pre = Vec::with_capacity(n);
        let mut pre_t = Vec::with_capacity(n);
        for (i, l) in self.layers.iter().enumerate() {
            let u = l.apply(&acts[i]);
            let ut = l.apply_linear(&tans[i]);
            let mut a = Vec::with_capacity(u.len());
            let mut t = Vec::with_capacity(u.len());
            for (&uv, &utv) in u.iter().zip(&ut) {
                let (s0, s1, _) = self.act(i, uv);
                a.push(s0);
                t.push(s1 * utv);
            }
            acts.push(a);
            tans.push(t);
            pre.push(u);
            pre_t.push(ut);
        }

        let mut grads = GradBundle::zeros_for(self);
        // Adjoints of the layer outputs (value and tangent). The scalar being
        // differentiated is the output tangent itself.
        let mut adj_a = vec![0.0; 1];
        let mut adj_t = vec![1.0; 1];
        for l in (0..n).rev() {
            let m = self.layers[l].n_out;
            let mut du = vec![0.0; m];
            let mut dut = vec![0.0; m];
            for k in 0..m {
                let (_, s1, s2) = self.act(l, pre[l][k]);
                du[k] = s1 * adj_a[k] + s2 * pre_t[l][k] * adj_t[k];
                dut[k] = s1 * adj_t[k];
            }
            grads.layers[l].accumulate_outer(&du, &acts[l]);
            grads.layers[l].accumulate_outer(&dut, &tans[l]);
            for (gb, d) in grads.layers[l].bias.iter_mut().zip(&du) {
                *gb += d;
            }
            adj_a = self.layers[l].apply_transposed(&du);
            adj_t = self.layers[l].apply_transposed(&dut);
        }
        Ok(grads)
    }

    /// `DNET1` blob: magic, u32 header length, JSON header, u64 parameter
    /// count, then little-endian f64 parameters in [`DiffNet::params`] order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = NetHeader {
            n_in: self.n_in,
            layer_sizes: self.layer_sizes(),
            hidden: self.hidden_act,
            output: self.output_act,
            rff: self.rff.as_ref().map(|r| RffHeader {
                features: r.features,
                sigma: r.sigma,
                seed: r.seed,
                omega: if r.seed.is_none() { Some(r.omega.clone()) } else { None },
                phase: if r.seed.is_none() { Some(r.phase.clone()) } else { None },
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let params = self.params();
        let mut out = Vec::with_capacity(5 + 4 + json.len() + 8 + params.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (net, used) = Self::read_from(bytes)?;
        if used != bytes.len() {
            return Err(Error::format(used as u64, "trailing bytes after DNET1 blob"));
        }
        Ok(net)
    }

    /// Parses one blob from the front of `bytes`; returns the net and bytes consumed.
    pub fn read_from(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(5)?;
        if magic != MAGIC {
            return Err(Error::format(0, "bad DNET1 magic"));
        }
        let hlen = r.u32()? as usize;
        let hoff = r.pos;
        let header: NetHeader = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::format(hoff as u64, format!("bad DNET1 header: {e}")))?;
        let count_off = r.pos;
        let count = r.u64()? as usize;
        let rff = match header.rff {
            None => None,
            Some(h) => Some(match (h.seed, h.omega, h.phase) {
                (Some(seed), _, _) => Rff::from_seed(header.n_in, h.features, h.sigma, seed)?,
                (None, Some(o), Some(p)) => Rff::with_params(header.n_in, o, p, h.sigma)?,
                _ => return Err(Error::format(hoff as u64, "rff header lacks seed and parameters")),
            }),
        };
        let sizes = &header.layer_sizes;
        if sizes.len() < 2 {
            return Err(Error::format(hoff as u64, "layer_sizes too short"));
        }
        let layers: Vec<Layer> = sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        let mut net = DiffNet::from_layers(header.n_in, rff, layers, header.hidden, header.output)
            .map_err(|e| Error::format(hoff as u64, e.to_string()))?;
        if count != net.param_count() {
            return Err(Error::format(
                count_off as u64,
                format!("parameter count {count} does not match architecture ({})", net.param_count()),
            ));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            params.push(r.f64()?);
        }
        net.set_params(&params)?;
        Ok((net, r.pos))
    }
}

#[derive(Serialize, Deserialize)]
struct RffHeader {
    features: usize,
    sigma: f64,
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    omega: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    phase: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct NetHeader {
    n_in: usize,
    layer_sizes: Vec<usize>,
    hidden: Activation,
    output: OutputActivation,
    rff: Option<RffHeader>,
}

/// Cursor over a byte slice that reports truncation with the failing offset.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated: needed {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}
