//! Two-branch learned preprocessor.
//!
//! A spatial branch (per-frame 3x3 convolutions) and a temporal branch
//! (per-pixel convolutions across frames) each produce 16 feature maps. A
//! 1x1 convolution over both, followed by a sigmoid, gives an attention map
//! `a` that blends them, `a * F_t + (1 - a) * F_s`, and a zero-initialized
//! 3x3 head turns the blend into a residual added to the input.
//!
//! | layer       | kernel           | parameters |
//! |-------------|------------------|-----------:|
//! | spatial 1   | 16 x 1 x 3 x 3   | 160        |
//! | spatial 2   | 16 x 16 x 3 x 3  | 2320       |
//! | spatial 3   | 16 x 16 x 3 x 3  | 2320       |
//! | temporal 1  | 16 x 1 x 3       | 64         |
//! | temporal 2  | 16 x 16 x 3      | 784        |
//! | temporal 3  | 16 x 16 x 3      | 784        |
//! | attention   | 16 x 32 x 1 x 1  | 528        |
//! | head        | 1 x 16 x 3 x 3   | 145        |
//! | total       |                  | 7105       |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::params::{he_uniform, ParamSet};
use crate::video::{Layout, VideoClip};

pub const FEATURES: usize = 16;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("preprocessor works on luma-only clips, got {0:?}")]
    NotLuma(Layout),
    #[error("parameter layout does not match the architecture: {0}")]
    Layout(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Name, weight shape and fan-in of every layer, in parameter order. Each
/// layer has a bias with one entry per output channel.
pub fn architecture() -> Vec<(&'static str, Vec<usize>, usize)> {
    let f = FEATURES;
    vec![
        ("spatial1", vec![f, 1, 3, 3], 9),
        ("spatial2", vec![f, f, 3, 3], f * 9),
        ("spatial3", vec![f, f, 3, 3], f * 9),
        ("temporal1", vec![f, 1, 3], 3),
        ("temporal2", vec![f, f, 3], f * 3),
        ("temporal3", vec![f, f, 3], f * 3),
        ("attention", vec![f, 2 * f, 1, 1], 2 * f),
        ("head", vec![1, f, 3, 3], f * 9),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor {
    params: ParamSet,
}

impl Preprocessor {
    /// He-uniform weights, zero biases, and an all-zero output head so the
    /// initial preprocessor is the identity.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for (name, shape, fan_in) in architecture() {
            let w = if name == "head" {
                Tensor::zeros(&shape)
            } else {
                he_uniform(&mut rng, &shape, fan_in)
            };
            entries.push((format!("{name}.weight"), w));
            entries.push((format!("{name}.bias"), Tensor::zeros(&[shape[0]])));
        }
        Self {
            params: ParamSet::new(entries),
        }
    }

    pub fn from_params(params: ParamSet) -> Result<Self, PreprocessError> {
        if !params.same_layout(&Self::init(0).params) {
            return Err(PreprocessError::Layout(format!(
                "{} tensors, {} values",
                params.len(),
                params.count()
            )));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Records the forward pass for `x` (`[T, H, W]`) with parameters bound
    /// as `vars` (in [`ParamSet`] order).
    pub fn forward(tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, PreprocessError> {
        let shape = tape.shape(x).to_vec();
        let [t, h, w] = shape[..] else {
            return Err(AutodiffError::invalid("preprocess", format!("expected [T, H, W], got {shape:?}")).into());
        };
        let weight = |i: usize| vars[2 * i];
        let bias = |i: usize| vars[2 * i + 1];
        let input = tape.reshape(x, &[t, 1, h, w])?;

        let mut spatial = input;
        for i in 0..3 {
            if i > 0 {
                spatial = tape.relu(spatial);
            }
            spatial = tape.conv2d(spatial, weight(i), Some(bias(i)))?;
        }
        let mut temporal = input;
        for i in 3..6 {
            if i > 3 {
                temporal = tape.relu(temporal);
            }
            temporal = tape.conv_temporal(temporal, weight(i), Some(bias(i)))?;
        }

        let both = tape.concat(&[temporal, spatial], 1)?;
        let a = tape.conv2d(both, weight(6), Some(bias(6)))?;
        let a = tape.sigmoid(a);
        let diff = tape.sub(temporal, spatial)?;
        let gated = tape.mul(a, diff)?;
        let fused = tape.add(spatial, gated)?;

        let residual = tape.conv2d(fused, weight(7), Some(bias(7)))?;
        let residual = tape.reshape(residual, &[t, h, w])?;
        let out = tape.add(x, residual)?;
        Ok(tape.clamp01(out))
    }

    pub fn preprocess(&self, clip: &VideoClip) -> Result<VideoClip, PreprocessError> {
        if clip.layout() != Layout::Luma {
            return Err(PreprocessError::NotLuma(clip.layout()));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(clip.luma_tensor().expect("luma clip"));
        let y = Self::forward(&mut tape, &vars, x)?;
        Ok(VideoClip::from_tensor(tape.value(y)).expect("same geometry"))
    }
}
