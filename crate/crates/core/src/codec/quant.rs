//! Scalar quantization of transform coefficients.

use std::str::FromStr;

use rand::Rng;

use super::CodecError;
use crate::autodiff::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive `U(-0.5, 0.5)` noise in place of rounding (training).
    Noise,
    /// Hard rounding with a straight-through gradient (evaluation).
    Round,
}

impl FromStr for QuantMode {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noise" => Ok(Self::Noise),
            "round" => Ok(Self::Round),
            other => Err(CodecError::InvalidMode(other.to_string())),
        }
    }
}

impl std::fmt::Display for QuantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Noise => "noise",
            Self::Round => "round",
        })
    }
}

/// `2^((f_q - 4) / 6)`: the step doubles every 6 units, and is 1 at `f_q = 4`.
pub fn quant_step(f_q: f32) -> f32 {
    ((f_q as f64 - 4.0) / 6.0).exp2() as f32
}

/// `coeffs / step`, then rounded (straight-through) or perturbed by uniform
/// noise drawn from `rng` in element order.
pub fn quantize<R: Rng>(tape: &mut Tape, coeffs: Var, step: f32, mode: QuantMode, rng: &mut R) -> Var {
    let scaled = tape.scale(coeffs, 1.0 / step);
    match mode {
        QuantMode::Round => tape.round_ste(scaled),
        QuantMode::Noise => {
            let shape = tape.shape(scaled).to_vec();
            let n: usize = shape.iter().product();
            let noise: Vec<f32> = (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect();
            let noise = tape.constant(Tensor::new(shape, noise).expect("noise shape"));
            tape.add(scaled, noise).expect("same shape")
        }
    }
}

pub fn dequantize(tape: &mut Tape, q: Var, step: f32) -> Var {
    tape.scale(q, step)
}
