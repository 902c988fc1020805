//! Differentiable stand-in for a block-based hybrid video codec.
//!
//! Each luma frame is split into 16x16 prediction blocks. A block is
//! predicted either from the previous reconstructed frame (integer motion
//! search) or from its reconstructed causal neighbourhood (DC, horizontal,
//! vertical), the residual goes through an 8x8 DCT, is quantized with step
//! `2^((f_q - 4) / 6)` and reconstructed. The rate is the negative log
//! likelihood of the quantized coefficients under a learned factorized prior.
//!
//! Residuals are transformed on the 8-bit scale (pixel values times 255) so a
//! quantization step of 1 corresponds to one code value, as in H.264.

pub mod dct;
pub mod encode;
pub mod entropy;
pub mod predict;
pub mod quant;

pub use dct::{dct8_forward, dct8_inverse};
pub use encode::{collect_symbols, encode_on_tape, virtual_encode, RDResult, TapeRd};
pub use entropy::EntropyModel;
pub use predict::{predict_frame, BlockDecision, PredMode, SideInfo};
pub use quant::{quant_step, QuantMode};

use thiserror::Error;

use crate::autodiff::AutodiffError;

pub const TRANSFORM_BLOCK: usize = 8;
pub const PRED_BLOCK: usize = 16;
pub const SEARCH_RANGE: usize = 7;
/// Coefficient positions per transform block, one entropy-model channel each.
pub const NUM_CHANNELS: usize = TRANSFORM_BLOCK * TRANSFORM_BLOCK;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("frame geometry {found:?} does not match {expected:?}")]
    SizeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("dimensions {width}x{height} are not multiples of {block}")]
    NotBlockAligned {
        width: usize,
        height: usize,
        block: usize,
    },
    #[error("invalid codec configuration: {0}")]
    Config(String),
    #[error("expected {expected} entropy channels, got {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("invalid quantization mode {0:?}")]
    InvalidMode(String),
    #[error("virtual codec works on luma-only clips")]
    NotLuma,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VirtualCodecConfig {
    pub transform_block: usize,
    pub pred_block: usize,
    pub search_range: usize,
    pub f_q: f32,
    pub quant_mode: QuantMode,
}

impl Default for VirtualCodecConfig {
    fn default() -> Self {
        Self {
            transform_block: TRANSFORM_BLOCK,
            pred_block: PRED_BLOCK,
            search_range: SEARCH_RANGE,
            f_q: 30.0,
            quant_mode: QuantMode::Round,
        }
    }
}

impl VirtualCodecConfig {
    pub fn with_fq(f_q: f32, quant_mode: QuantMode) -> Self {
        Self {
            f_q,
            quant_mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.transform_block != TRANSFORM_BLOCK {
            return Err(CodecError::Config(format!(
                "transform_block must be {TRANSFORM_BLOCK}, got {}",
                self.transform_block
            )));
        }
        if self.pred_block == 0 || !self.pred_block.is_multiple_of(self.transform_block) {
            return Err(CodecError::Config(format!(
                "pred_block {} is not a multiple of transform_block {}",
                self.pred_block, self.transform_block
            )));
        }
        if !(self.f_q >= 4.0 && self.f_q.is_finite()) {
            return Err(CodecError::Config(format!("f_q must be >= 4, got {}", self.f_q)));
        }
        Ok(())
    }

    pub fn step(&self) -> f32 {
        quant_step(self.f_q)
    }
}
