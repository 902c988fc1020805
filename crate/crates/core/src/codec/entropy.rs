//! Factorized prior: one learned monotone CDF per coefficient position.
//!
//! Each channel maps `x` through four stages `z = softplus(W) h + b`, with a
//! gated nonlinearity `h = z + tanh(a) * tanh(z)` after the first three, and
//! takes `c(x) = sigmoid(z)`. Widths are 1 -> 3 -> 3 -> 3 -> 1. Positive
//! weights and gates bounded by `|tanh| < 1` make `c` strictly increasing.
//!
//! Parameter row layout (43 values): `W0[3] b0[3] a0[3] W1[3x3] b1[3] a1[3]
//! W2[3x3] b2[3] a2[3] W3[3] b3[1]`, weights stored before the softplus.

use rand::Rng;

use super::{CodecError, NUM_CHANNELS};
use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::optim::Adam;

pub const PARAMS_PER_CHANNEL: usize = 43;
/// Smallest probability assigned to a symbol (20 bits).
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / (1u64 << 20) as f64;

const W0: usize = 0;
const B0: usize = 3;
const A0: usize = 6;
const W1: usize = 9;
const B1: usize = 18;
const A1: usize = 21;
const W2: usize = 24;
const B2: usize = 33;
const A2: usize = 36;
const W3: usize = 39;
const B3: usize = 42;

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Constrained parameters of one channel.
struct Channel {
    w0: [f64; 3],
    b0: [f64; 3],
    g0: [f64; 3],
    w1: [[f64; 3]; 3],
    b1: [f64; 3],
    g1: [f64; 3],
    w2: [[f64; 3]; 3],
    b2: [f64; 3],
    g2: [f64; 3],
    w3: [f64; 3],
    b3: f64,
}

/// Activations kept for the backward pass.
#[derive(Default)]
struct Trace {
    z: [[f64; 3]; 3],
    h: [[f64; 3]; 3],
    logit: f64,
}

impl Channel {
    fn new(raw: &[f32]) -> Self {
        let r = |i: usize| raw[i] as f64;
        let v3 = |o: usize, f: fn(f64) -> f64| [f(r(o)), f(r(o + 1)), f(r(o + 2))];
        let m3 = |o: usize| {
            let mut m = [[0.0; 3]; 3];
            for (i, row) in m.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = softplus(r(o + 3 * i + j));
                }
            }
            m
        };
        let id = |x: f64| x;
        Self {
            w0: v3(W0, softplus),
            b0: v3(B0, id),
            g0: v3(A0, f64::tanh),
            w1: m3(W1),
            b1: v3(B1, id),
            g1: v3(A1, f64::tanh),
            w2: m3(W2),
            b2: v3(B2, id),
            g2: v3(A2, f64::tanh),
            w3: v3(W3, softplus),
            b3: r(B3),
        }
    }

    fn logit(&self, x: f64, tr: &mut Trace) -> f64 {
        let gate = |z: f64, g: f64| z + g * z.tanh();
        for i in 0..3 {
            tr.z[0][i] = self.w0[i] * x + self.b0[i];
            tr.h[0][i] = gate(tr.z[0][i], self.g0[i]);
        }
        for (k, (w, b, g)) in [(&self.w1, &self.b1, &self.g1), (&self.w2, &self.b2, &self.g2)]
            .into_iter()
            .enumerate()
        {
            for i in 0..3 {
                let z = w[i][0] * tr.h[k][0] + w[i][1] * tr.h[k][1] + w[i][2] * tr.h[k][2] + b[i];
                tr.z[k + 1][i] = z;
                tr.h[k + 1][i] = gate(z, g[i]);
            }
        }
        tr.logit = self.w3[0] * tr.h[2][0] + self.w3[1] * tr.h[2][1] + self.w3[2] * tr.h[2][2] + self.b3;
        tr.logit
    }

    /// Accumulates d(logit)/d(constrained params) times `gl` into `acc`
    /// (same layout as the raw row) and returns d(logit)/dx times `gl`.
    fn logit_backward(&self, x: f64, tr: &Trace, gl: f64, acc: &mut [f64]) -> f64 {
        let mut dh = [0f64; 3];
        for j in 0..3 {
            acc[W3 + j] += gl * tr.h[2][j];
            dh[j] = gl * self.w3[j];
        }
        acc[B3] += gl;
        let stages = [
            (W2, B2, A2, &self.w2, &self.g2),
            (W1, B1, A1, &self.w1, &self.g1),
        ];
        for (s, (wo, bo, ao, w, g)) in stages.into_iter().enumerate() {
            let k = 2 - s;
            let mut dz = [0f64; 3];
            for i in 0..3 {
                let t = tr.z[k][i].tanh();
                dz[i] = dh[i] * (1.0 + g[i] * (1.0 - t * t));
                acc[ao + i] += dh[i] * t;
                acc[bo + i] += dz[i];
            }
            let mut prev = [0f64; 3];
            for i in 0..3 {
                for j in 0..3 {
                    acc[wo + 3 * i + j] += dz[i] * tr.h[k - 1][j];
                    prev[j] += dz[i] * w[i][j];
                }
            }
            dh = prev;
        }
        let mut dx = 0.0;
        for i in 0..3 {
            let t = tr.z[0][i].tanh();
            let dz = dh[i] * (1.0 + self.g0[i] * (1.0 - t * t));
            acc[A0 + i] += dh[i] * t;
            acc[B0 + i] += dz;
            acc[W0 + i] += dz * x;
            dx += dz * self.w0[i];
        }
        dx
    }
}

/// Chain rule from constrained to raw parameters.
fn to_raw_grad(raw: &[f32], acc: &[f64], out: &mut [f64]) {
    for i in 0..PARAMS_PER_CHANNEL {
        let r = raw[i] as f64;
        let scale = match i {
            W0..B0 | W1..B1 | W2..B2 | W3..B3 => sigmoid(r),
            A0..W1 | A1..W2 | A2..W3 => {
                let t = r.tanh();
                1.0 - t * t
            }
            _ => 1.0,
        };
        out[i] += acc[i] * scale;
    }
}

/// Probability of the unit interval around `v`, floored, and the pieces
/// needed for its gradient.
struct Symbol {
    raw: f64,
    p: f64,
    floored: bool,
    /// d p / d logit(v - 0.5) and d p / d logit(v + 0.5).
    dl: f64,
    du: f64,
}

fn symbol(ch: &Channel, v: f64, lo: &mut Trace, hi: &mut Trace) -> Symbol {
    let l = ch.logit(v - 0.5, lo);
    let u = ch.logit(v + 0.5, hi);
    // Evaluate in the tail where sigmoid differences keep precision.
    let s = if l + u > 0.0 { -1.0 } else { 1.0 };
    let (su, sl) = (sigmoid(s * u), sigmoid(s * l));
    let p = (s * (su - sl)).abs();
    Symbol {
        raw: p,
        p: p.max(LIKELIHOOD_FLOOR),
        floored: p < LIKELIHOOD_FLOOR,
        dl: -sl * (1.0 - sl),
        du: su * (1.0 - su),
    }
}

/// Bits of every symbol in `values` under channel `raw`, weighted, plus
/// optional gradients scaled by `upstream`.
fn channel_bits(
    raw: &[f32],
    values: &[f32],
    weights: Option<&[f64]>,
    upstream: f64,
    param_grad: Option<&mut [f64]>,
    mut value_grad: Option<&mut [f32]>,
) -> f64 {
    let ch = Channel::new(raw);
    let (mut lo, mut hi) = (Trace::default(), Trace::default());
    let mut acc = [0f64; PARAMS_PER_CHANNEL];
    let want_params = param_grad.is_some();
    let mut total = 0f64;
    for (i, &v) in values.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let s = symbol(&ch, v as f64, &mut lo, &mut hi);
        total += -w * s.p.log2();
        if !want_params && value_grad.is_none() {
            continue;
        }
        // Lower-bound semantics: below the floor, only gradients that would
        // raise the probability pass (always the case for a bits loss).
        let dbits_dp = -w * upstream / (s.p * std::f64::consts::LN_2);
        if s.floored && dbits_dp >= 0.0 {
            continue;
        }
        let (gl, gu) = (dbits_dp * s.dl, dbits_dp * s.du);
        let dx = if want_params {
            ch.logit_backward(v as f64 - 0.5, &lo, gl, &mut acc) + ch.logit_backward(v as f64 + 0.5, &hi, gu, &mut acc)
        } else {
            let mut scratch = [0f64; PARAMS_PER_CHANNEL];
            ch.logit_backward(v as f64 - 0.5, &lo, gl, &mut scratch)
                + ch.logit_backward(v as f64 + 0.5, &hi, gu, &mut scratch)
        };
        if let Some(g) = value_grad.as_deref_mut() {
            g[i] = dx as f32;
        }
    }
    if let Some(out) = param_grad {
        to_raw_grad(raw, &acc, out);
    }
    total
}

/// Learnable per-channel CDF parameters, `[channels, 43]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyModel {
    params: Tensor,
}

impl Default for EntropyModel {
    fn default() -> Self {
        Self::new(NUM_CHANNELS)
    }
}

impl EntropyModel {
    /// Every channel starts as the unit logistic CDF `sigmoid(x)`.
    pub fn new(channels: usize) -> Self {
        let one = (std::f64::consts::E - 1.0).ln() as f32;
        let third = ((1.0f64 / 3.0).exp() - 1.0).ln() as f32;
        let mut row = [0f32; PARAMS_PER_CHANNEL];
        row[W0..B0].fill(one);
        row[W1..B1].fill(third);
        row[W2..B2].fill(third);
        row[W3..B3].fill(third);
        let data = (0..channels).flat_map(|_| row).collect();
        Self {
            params: Tensor::new(vec![channels, PARAMS_PER_CHANNEL], data).expect("entropy params"),
        }
    }

    pub fn from_tensor(params: Tensor) -> Result<Self, CodecError> {
        match params.shape() {
            [_, PARAMS_PER_CHANNEL] if params.all_finite() => Ok(Self { params }),
            s => Err(CodecError::Config(format!(
                "entropy params must be finite [C, {PARAMS_PER_CHANNEL}], got {s:?}"
            ))),
        }
    }

    pub fn channels(&self) -> usize {
        self.params.shape()[0]
    }

    pub fn params(&self) -> &Tensor {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Tensor {
        &mut self.params
    }

    pub fn into_tensor(self) -> Tensor {
        self.params
    }

    fn row(&self, ch: usize) -> &[f32] {
        &self.params.data()[ch * PARAMS_PER_CHANNEL..(ch + 1) * PARAMS_PER_CHANNEL]
    }

    /// `c(x) = sigmoid(cdf_logit(x))`.
    pub fn cdf_logit(&self, ch: usize, x: f64) -> f64 {
        Channel::new(self.row(ch)).logit(x, &mut Trace::default())
    }

    pub fn cdf(&self, ch: usize, x: f64) -> f64 {
        sigmoid(self.cdf_logit(ch, x))
    }

    /// `c(v + 0.5) - c(v - 0.5)` before flooring.
    pub fn probability(&self, ch: usize, v: f64) -> f64 {
        let c = Channel::new(self.row(ch));
        symbol(&c, v, &mut Trace::default(), &mut Trace::default()).raw
    }

    /// Probability used for rate, floored at [`LIKELIHOOD_FLOOR`].
    pub fn likelihood(&self, ch: usize, v: f64) -> f64 {
        self.probability(ch, v).max(LIKELIHOOD_FLOOR)
    }

    /// Total bits of `[channels, N]` symbols.
    pub fn bits(&self, q: &Tensor) -> Result<f64, CodecError> {
        let n = self.check(q.shape())?;
        Ok((0..self.channels())
            .map(|c| channel_bits(self.row(c), &q.data()[c * n..(c + 1) * n], None, 1.0, None, None))
            .sum())
    }

    fn check(&self, shape: &[usize]) -> Result<usize, CodecError> {
        match *shape {
            [c, n] if c == self.channels() => Ok(n),
            [c, _] => Err(CodecError::ChannelMismatch {
                expected: self.channels(),
                found: c,
            }),
            _ => Err(CodecError::Config(format!("symbols must be [C, N], got {shape:?}"))),
        }
    }

    /// Fits the model to integer symbols (`[channels, N]`) by minimizing the
    /// mean bits per symbol with Adam. Returns the final bits per symbol.
    pub fn fit(&mut self, q: &Tensor, steps: usize, lr: f32) -> Result<f64, CodecError> {
        let n = self.check(q.shape())?;
        // Compress each channel to (value, count) pairs.
        let hist: Vec<(Vec<f32>, Vec<f64>)> = (0..self.channels())
            .map(|c| {
                let mut vals: Vec<f32> = q.data()[c * n..(c + 1) * n].to_vec();
                vals.sort_by(f32::total_cmp);
                let mut values = Vec::new();
                let mut counts = Vec::new();
                for v in vals {
                    if values.last() == Some(&v) {
                        *counts.last_mut().unwrap() += 1.0;
                    } else {
                        values.push(v);
                        counts.push(1.0);
                    }
                }
                (values, counts)
            })
            .collect();
        let total = (self.channels() * n) as f64;
        let mut adam = Adam::new(&[self.params.len()]);
        for _ in 0..steps {
            let mut grad = vec![0f64; self.params.len()];
            for (c, (values, counts)) in hist.iter().enumerate() {
                let g = &mut grad[c * PARAMS_PER_CHANNEL..(c + 1) * PARAMS_PER_CHANNEL];
                channel_bits(self.row(c), values, Some(counts), 1.0 / total, Some(g), None);
            }
            let grad = Tensor::new(self.params.shape().to_vec(), grad.iter().map(|&g| g as f32).collect())?;
            adam.step(&mut [&mut self.params], &[&grad], &[Some(lr)])
                .map_err(|e| CodecError::Config(e.to_string()))?;
        }
        let bits: f64 = hist
            .iter()
            .enumerate()
            .map(|(c, (values, counts))| channel_bits(self.row(c), values, Some(counts), 1.0, None, None))
            .sum();
        Ok(bits / total)
    }
}

/// Discretized Laplacian samples `round(L(0, b))`, used to sanity-check fits.
pub fn sample_discrete_laplacian<R: Rng>(rng: &mut R, b: f64, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(-0.5..0.5);
            (-b * u.signum() * (1.0 - 2.0 * u.abs()).ln()).round() as f32
        })
        .collect()
}

struct EntropyBits;

impl CustomOp for EntropyBits {
    fn name(&self) -> &'static str {
        "entropy_bits"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (q, params) = (inputs[0], inputs[1]);
        let (channels, n) = (q.shape()[0], q.shape()[1]);
        let mut gq = vec![0f32; q.len()];
        let mut gp = vec![0f64; params.len()];
        for c in 0..channels {
            channel_bits(
                &params.data()[c * PARAMS_PER_CHANNEL..(c + 1) * PARAMS_PER_CHANNEL],
                &q.data()[c * n..(c + 1) * n],
                None,
                grad_out[0] as f64,
                Some(&mut gp[c * PARAMS_PER_CHANNEL..(c + 1) * PARAMS_PER_CHANNEL]),
                Some(&mut gq[c * n..(c + 1) * n]),
            );
        }
        vec![Some(gq), Some(gp.into_iter().map(|g| g as f32).collect())]
    }
}

impl Tape {
    /// Total bits `-sum log2 p` of `[C, N]` symbols under entropy parameters
    /// `[C, 43]`; differentiable in both.
    pub fn entropy_bits(&mut self, q: Var, params: Var) -> Result<Var, CodecError> {
        let model = EntropyModel::from_tensor(self.value(params).clone())?;
        let bits = model.bits(self.value(q))?;
        let value = Tensor::scalar(bits as f32);
        Ok(self.custom(&[q, params], value, Box::new(EntropyBits)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_unit_logistic() {
        let m = EntropyModel::new(2);
        for x in [-3.0, -0.5, 0.0, 1.25, 4.0] {
            assert!((m.cdf(1, x) - sigmoid(x)).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn probabilities_telescope() {
        let m = EntropyModel::new(1);
        let total: f64 = (-30..=30).map(|v| m.probability(0, v as f64)).sum();
        assert!(total <= 1.0 && total > 0.999_999);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let raw: Vec<f32> = (0..PARAMS_PER_CHANNEL).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let values = [-2.0f32, 0.3, 1.7];
        let mut g = vec![0f64; PARAMS_PER_CHANNEL];
        let mut gv = vec![0f32; 3];
        channel_bits(&raw, &values, None, 1.0, Some(&mut g), Some(&mut gv));
        let f = |r: &[f32], v: &[f32]| channel_bits(r, v, None, 1.0, None, None);
        let h = 1e-3f32;
        for i in 0..PARAMS_PER_CHANNEL {
            let (mut a, mut b) = (raw.clone(), raw.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a, &values) - f(&b, &values)) / (2.0 * h as f64);
            assert!((fd - g[i]).abs() / fd.abs().max(1.0) < 1e-3, "param {i}: {fd} vs {}", g[i]);
        }
        for i in 0..3 {
            let (mut a, mut b) = (values, values);
            a[i] += h;
            b[i] -= h;
            let fd = (f(&raw, &a) - f(&raw, &b)) / (2.0 * h as f64);
            assert!((fd - gv[i] as f64).abs() / fd.abs().max(1.0) < 1e-3, "value {i}");
        }
    }
}
