use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{TrainConfig, TrainError};
use crate::analyzer::{accuracy_loss, Analyzer};
use crate::autodiff::{Tape, Tensor};
use crate::codec::{encode_on_tape, EntropyModel, QuantMode, VirtualCodecConfig};
use crate::preprocessor::Preprocessor;
use crate::video::LabeledClip;

/// Scalar values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Components {
    pub total: f64,
    pub distortion: f64,
    pub rate: f64,
    pub accuracy: f64,
}

/// `alpha * (distortion + lambda * rate) + accuracy`.
pub fn combine(alpha: f64, lambda: f64, distortion: f64, rate: f64, accuracy: f64) -> f64 {
    alpha * (distortion + lambda * rate) + accuracy
}

/// Everything the objective reads. `preprocessor: None` is the anchor
/// pipeline where the codec sees the source directly.
pub struct LossContext<'a> {
    pub cfg: &'a TrainConfig,
    pub codec: &'a VirtualCodecConfig,
    pub preprocessor: Option<&'a Preprocessor>,
    pub entropy: &'a EntropyModel,
    pub analyzer: &'a Analyzer,
    pub train_preprocessor: bool,
    pub train_analyzer: bool,
}

/// Gradients of the total loss; `None` where a group was not trainable.
#[derive(Clone, Debug)]
pub struct ElementGrads {
    pub preprocessor: Option<Vec<Tensor>>,
    pub entropy: Tensor,
    pub analyzer: Option<Vec<Tensor>>,
}

/// Objective for one clip at quantization factor `f_q` with noise-mode
/// quantization seeded by `noise_seed`. Distortion is measured between the
/// reconstruction and the unprocessed source.
pub fn total_loss(
    ctx: &LossContext,
    clip: &LabeledClip,
    f_q: u32,
    noise_seed: u64,
    backward: bool,
) -> Result<(Components, Option<ElementGrads>), TrainError> {
    let mut tape = Tape::new();
    let x = tape.constant(clip.clip.luma_tensor()?);
    let (processed, pre_vars) = match ctx.preprocessor {
        Some(p) => {
            let vars = p.params().bind(&mut tape, ctx.train_preprocessor);
            (Preprocessor::forward(&mut tape, &vars, x)?, vars)
        }
        None => (x, Vec::new()),
    };
    let ent = tape.leaf(ctx.entropy.params().clone(), true);
    let codec = VirtualCodecConfig {
        f_q: f_q as f32,
        quant_mode: QuantMode::Noise,
        ..ctx.codec.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let rd = encode_on_tape(&mut tape, processed, x, ent, &codec, &mut rng)?;
    let an_vars = ctx.analyzer.params().bind(&mut tape, ctx.train_analyzer);
    let logits = Analyzer::forward(&mut tape, &an_vars, rd.recon)?;
    let acc = accuracy_loss(&mut tape, logits, clip.label)?;

    let rate = tape.scale(rd.bpp, ctx.cfg.lambda);
    let rd_loss = tape.add(rd.distortion, rate)?;
    let rd_loss = tape.scale(rd_loss, ctx.cfg.alpha);
    let total = tape.add(rd_loss, acc)?;

    let value = |v| tape.value(v).item() as f64;
    let components = Components {
        total: value(total),
        distortion: value(rd.distortion),
        rate: value(rd.bpp),
        accuracy: value(acc),
    };
    if !backward {
        return Ok((components, None));
    }
    let mut g = tape.backward(total)?;
    let mut take = |vars: &[crate::autodiff::Var]| -> Vec<Tensor> {
        vars.iter()
            .map(|&v| g.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect()
    };
    let preprocessor = ctx.train_preprocessor.then(|| take(&pre_vars));
    let analyzer = ctx.train_analyzer.then(|| take(&an_vars));
    let entropy = take(&[ent]).pop().expect("one tensor");
    Ok((
        components,
        Some(ElementGrads {
            preprocessor,
            entropy,
            analyzer,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_arithmetic() {
        let l = combine(10.0, 0.001, 0.01, 0.8, 0.5);
        assert!((l - 0.608).abs() < 1e-12, "{l}");
    }
}
