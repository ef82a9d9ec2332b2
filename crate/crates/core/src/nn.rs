//! A small time-conditioned MLP with hand-written backpropagation.
//!
//! [`Mlp`] stores all parameters in one flat `Vec<f64>` (per layer: a
//! row-major `out × in` weight block followed by the bias), which keeps Adam,
//! EMA, hashing and checkpointing trivial. [`ConsistencyNet`] wraps an `Mlp`
//! with a sinusoidal time embedding and the skip parameterization
//!
//! ```text
//! D(x, t) = c_skip(t) x + c_out(t) F(c_in(t) x, embed(t))
//! c_skip(t) = σ_d² / ((t - ε)² + σ_d²)
//! c_out(t)  = σ_d (t - ε) / sqrt(t² + σ_d²)
//! c_in(t)   = 1 / sqrt(t² + σ_d²)
//! ```
//!
//! so that `D(x, ε) = x` holds exactly for any parameters.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::timegrid::KarrasGrid;
use crate::{Error, Point, Result};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Parse(format!("unknown activation '{other}'"))),
        }
    }
}

/// Fully connected network; hidden layers share one activation, the output
/// layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    /// Bumped on every parameter mutation so stale tapes can be detected.
    generation: u64,
}

/// Activations recorded by [`Mlp::forward_tape`], consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpTape {
    generation: u64,
    /// Layer inputs/outputs: `values[0]` is the input, `values[L]` the output.
    values: Vec<Vec<f64>>,
}

impl Mlp {
    /// LeCun-normal weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::domain(format!("invalid layer sizes {sizes:?}")));
        }
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (1.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let z: f64 = rng.sample(StandardNormal);
                params.push(std * z);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            params,
            generation: next_generation(),
        })
    }

    pub fn from_params(sizes: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::domain(format!("invalid layer sizes {sizes:?}")));
        }
        let expected = param_count(sizes);
        if params.len() != expected {
            return Err(Error::domain(format!(
                "expected {expected} parameters for sizes {sizes:?}, got {}",
                params.len()
            )));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            params,
            generation: next_generation(),
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation = next_generation();
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::domain("parameter length mismatch"));
        }
        self.params_mut().copy_from_slice(params);
        Ok(())
    }

    /// Zero the output layer's weights and bias.
    pub fn zero_output_layer(&mut self) {
        let n = self.sizes.len();
        let len = self.sizes[n - 2] * self.sizes[n - 1] + self.sizes[n - 1];
        let total = self.params.len();
        self.params_mut()[total - len..].fill(0.0);
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        let mut offset = 0;
        let layers = self.sizes.len() - 1;
        for l in 0..layers {
            cur = self.layer(l, &mut offset, &cur);
        }
        Ok(cur)
    }

    pub fn forward_tape(&self, input: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
        self.check_input(input)?;
        let layers = self.sizes.len() - 1;
        let mut values = Vec::with_capacity(layers + 1);
        values.push(input.to_vec());
        let mut offset = 0;
        for l in 0..layers {
            let next = self.layer(l, &mut offset, &values[l]);
            values.push(next);
        }
        let out = values[layers].clone();
        Ok((
            out,
            MlpTape {
                generation: self.generation,
                values,
            },
        ))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.sizes[0] {
            return Err(Error::domain(format!(
                "input has dimension {}, expected {}",
                input.len(),
                self.sizes[0]
            )));
        }
        Ok(())
    }

    fn layer(&self, l: usize, offset: &mut usize, input: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.params[*offset..*offset + n_in * n_out];
        let b = &self.params[*offset + n_in * n_out..*offset + n_in * n_out + n_out];
        *offset += n_in * n_out + n_out;
        let hidden = l + 1 < self.sizes.len() - 1;
        (0..n_out)
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = b[o] + dot(row, input);
                if hidden {
                    self.activation.apply(z)
                } else {
                    z
                }
            })
            .collect()
    }

    /// Reverse pass: adds `∂loss/∂params` into `grads` and returns
    /// `∂loss/∂input`, given `d_output = ∂loss/∂output`.
    pub fn backward(
        &self,
        tape: &MlpTape,
        d_output: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        if tape.generation != self.generation {
            return Err(Error::Contract(
                "tape was recorded against different parameters".into(),
            ));
        }
        if grads.len() != self.params.len() {
            return Err(Error::domain("gradient buffer length mismatch"));
        }
        if d_output.len() != self.output_dim() {
            return Err(Error::domain("output gradient dimension mismatch"));
        }
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        // gradient w.r.t. the pre-activation of the current layer
        let mut delta = d_output.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &tape.values[l];
            let o = offsets[l];
            let (gw, gb) = grads[o..o + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for j in 0..n_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                gb[j] += d;
                for (g, x) in gw[j * n_in..(j + 1) * n_in].iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            let w = &self.params[o..o + n_in * n_out];
            let mut d_in = vec![0.0; n_in];
            for j in 0..n_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                for (di, wv) in d_in.iter_mut().zip(&w[j * n_in..(j + 1) * n_in]) {
                    *di += d * wv;
                }
            }
            if l > 0 {
                for (di, a) in d_in.iter_mut().zip(input) {
                    *di *= self.activation.derivative_from_output(*a);
                }
            }
            delta = d_in;
        }
        Ok(delta)
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        let x: &[f64; 8] = x.try_into().unwrap();
        let y: &[f64; 8] = y.try_into().unwrap();
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// SHA-256 over the little-endian bytes of the parameters.
pub fn param_hash(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub frequencies: usize,
    pub sigma_data: f64,
}

impl NetConfig {
    /// 3 × 128 tanh, 8 embedding frequencies, σ_d = 0.5.
    pub fn default_for(data_dim: usize) -> Self {
        Self {
            data_dim,
            hidden: vec![128, 128, 128],
            activation: Activation::Tanh,
            frequencies: 8,
            sigma_data: 0.5,
        }
    }
}

/// The consistency model `D_θ(x, t)`.
#[derive(Debug, Clone)]
pub struct ConsistencyNet {
    mlp: Mlp,
    data_dim: usize,
    sigma_data: f64,
    eps: f64,
    t_max: f64,
    frequencies: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NetTape {
    mlp: MlpTape,
    c_out: f64,
}

impl ConsistencyNet {
    pub fn new<R: Rng + ?Sized>(cfg: &NetConfig, grid: &KarrasGrid, rng: &mut R) -> Result<Self> {
        if cfg.data_dim == 0 || cfg.frequencies == 0 {
            return Err(Error::domain("data_dim and frequencies must be positive"));
        }
        if !(cfg.sigma_data > 0.0) {
            return Err(Error::domain("sigma_data must be positive"));
        }
        let mut sizes = vec![cfg.data_dim + 2 * cfg.frequencies];
        sizes.extend(&cfg.hidden);
        sizes.push(cfg.data_dim);
        let mut mlp = Mlp::new(&sizes, cfg.activation, rng)?;
        mlp.zero_output_layer();
        Ok(Self {
            mlp,
            data_dim: cfg.data_dim,
            sigma_data: cfg.sigma_data,
            eps: grid.eps(),
            t_max: grid.t_max(),
            frequencies: embedding_frequencies(cfg.frequencies),
        })
    }

    pub fn config(&self) -> NetConfig {
        let sizes = self.mlp.sizes();
        NetConfig {
            data_dim: self.data_dim,
            hidden: sizes[1..sizes.len() - 1].to_vec(),
            activation: self.mlp.activation(),
            frequencies: self.frequencies.len(),
            sigma_data: self.sigma_data,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn param_hash(&self) -> String {
        param_hash(self.mlp.params())
    }

    pub fn c_skip(&self, t: f64) -> f64 {
        let s2 = self.sigma_data * self.sigma_data;
        s2 / ((t - self.eps).powi(2) + s2)
    }

    pub fn c_out(&self, t: f64) -> f64 {
        self.sigma_data * (t - self.eps) / (t * t + self.sigma_data * self.sigma_data).sqrt()
    }

    fn c_in(&self, t: f64) -> f64 {
        1.0 / (t * t + self.sigma_data * self.sigma_data).sqrt()
    }

    /// Sinusoidal features of log-time normalized to `[0, 1]` over `[ε, T]`.
    pub fn embed(&self, t: f64) -> Vec<f64> {
        let u = (t.ln() - self.eps.ln()) / (self.t_max.ln() - self.eps.ln());
        let mut out = Vec::with_capacity(2 * self.frequencies.len());
        for f in &self.frequencies {
            out.push((f * u).sin());
            out.push((f * u).cos());
        }
        out
    }

    fn inputs(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.data_dim {
            return Err(Error::domain(format!(
                "input has dimension {}, network expects {}",
                x.len(),
                self.data_dim
            )));
        }
        if !(t >= self.eps) {
            return Err(Error::domain(format!(
                "t = {t} is below the boundary time {}",
                self.eps
            )));
        }
        let c_in = self.c_in(t);
        let mut input: Vec<f64> = x.iter().map(|v| c_in * v).collect();
        input.extend(self.embed(t));
        Ok(input)
    }

    pub fn forward(&self, x: &[f64], t: f64) -> Result<Point> {
        let input = self.inputs(x, t)?;
        let f = self.mlp.forward(&input)?;
        let (cs, co) = (self.c_skip(t), self.c_out(t));
        Ok(x.iter().zip(&f).map(|(xi, fi)| cs * xi + co * fi).collect())
    }

    pub fn forward_tape(&self, x: &[f64], t: f64) -> Result<(Point, NetTape)> {
        let input = self.inputs(x, t)?;
        let (f, tape) = self.mlp.forward_tape(&input)?;
        let (cs, co) = (self.c_skip(t), self.c_out(t));
        let out = x.iter().zip(&f).map(|(xi, fi)| cs * xi + co * fi).collect();
        Ok((
            out,
            NetTape {
                mlp: tape,
                c_out: co,
            },
        ))
    }

    /// Adds parameter gradients of a scalar loss into `grads`, given the loss
    /// gradient at the network output.
    pub fn backward(&self, tape: &NetTape, d_output: &[f64], grads: &mut [f64]) -> Result<()> {
        let d_f: Vec<f64> = d_output.iter().map(|d| d * tape.c_out).collect();
        self.mlp.backward(&tape.mlp, &d_f, grads)?;
        Ok(())
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.mlp.set_params(params)?;
        Ok(out)
    }

    const HEADER: &'static str = "purilab-consistency-net v1";

    /// Textual checkpoint. Values use the shortest round-trip decimal form, so
    /// parsing restores every bit.
    pub fn to_checkpoint(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let sizes: Vec<String> = self.mlp.sizes().iter().map(|v| v.to_string()).collect();
        writeln!(s, "{}", Self::HEADER).unwrap();
        writeln!(s, "data_dim {}", self.data_dim).unwrap();
        writeln!(s, "sigma_data {:?}", self.sigma_data).unwrap();
        writeln!(s, "eps {:?}", self.eps).unwrap();
        writeln!(s, "t_max {:?}", self.t_max).unwrap();
        writeln!(s, "frequencies {}", self.frequencies.len()).unwrap();
        writeln!(s, "activation {}", self.mlp.activation().name()).unwrap();
        writeln!(s, "sizes {}", sizes.join(" ")).unwrap();
        writeln!(s, "params {}", self.mlp.num_params()).unwrap();
        for p in self.mlp.params() {
            writeln!(s, "{p:?}").unwrap();
        }
        s
    }

    /// Parses [`to_checkpoint`](Self::to_checkpoint) output; lines starting
    /// with `#` are ignored.
    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let perr = |m: &str| Error::Parse(format!("checkpoint: {m}"));
        if lines.next() != Some(Self::HEADER) {
            return Err(perr("missing or unsupported header"));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| perr(&format!("missing field {name}")))?;
            line.strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| perr(&format!("expected field {name}, found '{line}'")))
        };
        let num = |v: String, name: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| perr(&format!("bad value for {name}")))
        };
        let int = |v: String, name: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| perr(&format!("bad value for {name}")))
        };
        let data_dim = int(field("data_dim")?, "data_dim")?;
        let sigma_data = num(field("sigma_data")?, "sigma_data")?;
        let eps = num(field("eps")?, "eps")?;
        let t_max = num(field("t_max")?, "t_max")?;
        let n_freq = int(field("frequencies")?, "frequencies")?;
        let activation: Activation = field("activation")?.parse()?;
        let sizes = field("sizes")?
            .split_whitespace()
            .map(|v| v.parse::<usize>().map_err(|_| perr("bad layer size")))
            .collect::<Result<Vec<_>>>()?;
        let count = int(field("params")?, "params")?;
        let params = lines
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| perr(&format!("bad parameter '{l}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        if params.len() != count {
            return Err(perr(&format!(
                "expected {count} parameters, found {}",
                params.len()
            )));
        }
        if sizes.first() != Some(&(data_dim + 2 * n_freq)) || sizes.last() != Some(&data_dim) {
            return Err(perr("layer sizes inconsistent with data_dim/frequencies"));
        }
        if !(eps > 0.0 && t_max > eps && sigma_data > 0.0) {
            return Err(perr("invalid time horizon or sigma_data"));
        }
        Ok(Self {
            mlp: Mlp::from_params(&sizes, activation, params)?,
            data_dim,
            sigma_data,
            eps,
            t_max,
            frequencies: embedding_frequencies(n_freq),
        })
    }
}

/// `k` frequencies spaced geometrically from 1 to 1000.
fn embedding_frequencies(k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    (0..k)
        .map(|i| 1000f64.powf(i as f64 / (k - 1) as f64))
        .collect()
}

/// Exponential moving average of parameters: the target network θ⁻.
#[derive(Debug, Clone)]
pub struct EmaShadow {
    decay: f64,
    params: Vec<f64>,
}

impl EmaShadow {
    pub fn new(params: &[f64], decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::domain(format!(
                "EMA decay must be in [0, 1), got {decay}"
            )));
        }
        Ok(Self {
            decay,
            params: params.to_vec(),
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn update(&mut self, live: &[f64]) -> Result<()> {
        if live.len() != self.params.len() {
            return Err(Error::domain("EMA shape mismatch"));
        }
        let d = self.decay;
        for (s, l) in self.params.iter_mut().zip(live) {
            *s = d * *s + (1.0 - d) * l;
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_num: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_num: 1e-8,
        }
    }

    /// Applies one update in place. A non-finite gradient leaves both the
    /// parameters and the optimizer state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::domain("Adam shape mismatch"));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical {
                msg: format!("non-finite gradient at parameter {i}; update skipped"),
                x: vec![grads[i]],
                t: f64::NAN,
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps_num);
        }
        Ok(())
    }
}
