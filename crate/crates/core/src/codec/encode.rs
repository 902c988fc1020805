//! Closed-loop virtual encoding of a luma clip on a tape.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::entropy::EntropyModel;
use super::predict::{check_aligned, decide_block, motion_candidates, inter_origin, FrameView, PredMode, SideInfo};
use super::quant::{dequantize, quantize};
use super::{CodecError, VirtualCodecConfig, NUM_CHANNELS, TRANSFORM_BLOCK};
use crate::autodiff::{Tape, Tensor, Var};
use crate::video::VideoClip;

/// Handles produced by [`encode_on_tape`].
#[derive(Clone, Debug)]
pub struct TapeRd {
    /// Reconstructed clip `[T, H, W]`.
    pub recon: Var,
    /// Quantized coefficients grouped by coefficient position, `[64, N]`.
    pub symbols: Var,
    /// Estimated bits (scalar).
    pub bits: Var,
    /// `bits / (T H W)`.
    pub bpp: Var,
    /// MSE between `recon` and the source.
    pub distortion: Var,
    pub side_info: SideInfo,
    /// The same rate and distortion evaluated in double precision.
    pub bits_f64: f64,
    pub distortion_f64: f64,
}

/// Result of one virtual-codec pass.
#[derive(Clone, Debug)]
pub struct RDResult {
    pub distortion: f64,
    pub rate: f64,
    pub bpp: f64,
    pub recon: VideoClip,
    pub side_info: SideInfo,
    /// Quantized coefficients `[64, N]`.
    pub symbols: Tensor,
}

fn bordered_prediction(
    tape: &mut Tape,
    mode: PredMode,
    top: Option<Var>,
    left: Option<Var>,
    prev: Option<Var>,
    origin: (usize, usize),
    dims: (usize, usize),
    b: usize,
) -> Result<Var, CodecError> {
    let top_row = |tape: &mut Tape| tape.crop2d(top.expect("top neighbour"), b - 1, 0, 1, b);
    let left_col = |tape: &mut Tape| tape.crop2d(left.expect("left neighbour"), 0, b - 1, b, 1);
    Ok(match mode {
        PredMode::Inter { dx, dy } => {
            let (sy, sx) = inter_origin(origin.0, origin.1, dy, dx, b, dims.1, dims.0).expect("valid motion vector");
            tape.crop2d(prev.expect("reference frame"), sy, sx, b, b)?
        }
        PredMode::Horizontal => {
            let col = left_col(tape)?;
            tape.tile2d(col, (1, b))?
        }
        PredMode::Vertical => {
            let row = top_row(tape)?;
            tape.tile2d(row, (b, 1))?
        }
        PredMode::Dc => {
            let mut border = Vec::new();
            if top.is_some() {
                let r = top_row(tape)?;
                border.push(tape.reshape(r, &[b])?);
            }
            if left.is_some() {
                let c = left_col(tape)?;
                border.push(tape.reshape(c, &[b])?);
            }
            if border.is_empty() {
                tape.constant(Tensor::full(&[b, b], 0.5))
            } else {
                let all = tape.concat(&border, 0)?;
                let m = tape.mean(all);
                let m = tape.reshape(m, &[1, 1])?;
                tape.tile2d(m, (b, b))?
            }
        }
    })
}

/// Permutation taking concatenated `[n_blocks * b, b]` coefficient blocks to
/// `[64, N]` with one row per coefficient position.
fn symbol_index(n_blocks: usize, b: usize) -> (Vec<u32>, usize) {
    let t = TRANSFORM_BLOCK;
    let tiles_per_block = (b / t) * (b / t);
    let n = n_blocks * tiles_per_block;
    let mut index = vec![0u32; NUM_CHANNELS * n];
    for k in 0..n_blocks {
        for ty in 0..b / t {
            for tx in 0..b / t {
                let col = k * tiles_per_block + ty * (b / t) + tx;
                for u in 0..t {
                    for v in 0..t {
                        let src = (k * b + ty * t + u) * b + tx * t + v;
                        index[(u * t + v) * n + col] = src as u32;
                    }
                }
            }
        }
    }
    (index, n)
}

/// Encodes `clip` (`[T, H, W]`) in raster block order, frame by frame, each
/// inter frame predicted from the previous reconstruction. Distortion is
/// measured against `source`; uniform quantization noise (noise mode) is
/// drawn from `rng` in coding order.
pub fn encode_on_tape<R: Rng>(
    tape: &mut Tape,
    clip: Var,
    source: Var,
    entropy_params: Var,
    cfg: &VirtualCodecConfig,
    rng: &mut R,
) -> Result<TapeRd, CodecError> {
    cfg.validate()?;
    let shape = tape.shape(clip).to_vec();
    let [t, h, w] = shape[..] else {
        return Err(CodecError::Config(format!("expected a [T, H, W] clip, got {shape:?}")));
    };
    if tape.shape(source) != shape.as_slice() {
        let s = tape.shape(source).to_vec();
        return Err(CodecError::SizeMismatch {
            expected: (w, h),
            found: (*s.last().unwrap_or(&0), *s.get(s.len().wrapping_sub(2)).unwrap_or(&0)),
        });
    }
    let b = cfg.pred_block;
    check_aligned(w, h, b)?;
    let step = cfg.step();
    let candidates = motion_candidates(cfg.search_range);

    let mut side_info = SideInfo::default();
    let mut q_blocks = Vec::with_capacity(t * (h / b) * (w / b));
    let mut frames = Vec::with_capacity(t);
    let mut prev: Option<(Var, Vec<f32>)> = None;
    for ti in 0..t {
        let frame = tape.narrow(clip, 0, ti, 1)?;
        let frame = tape.reshape(frame, &[h, w])?;
        let cur_vals = tape.value(frame).data().to_vec();
        let mut recon_vals = vec![0f32; h * w];
        let mut block_rows: Vec<Vec<Var>> = Vec::with_capacity(h / b);
        let mut decisions = Vec::with_capacity((h / b) * (w / b));
        for y0 in (0..h).step_by(b) {
            let mut row: Vec<Var> = Vec::with_capacity(w / b);
            for x0 in (0..w).step_by(b) {
                let cur = FrameView { data: &cur_vals, w, h };
                let recon = FrameView { data: &recon_vals, w, h };
                let reference = prev.as_ref().map(|(_, v)| FrameView { data: v, w, h });
                let d = decide_block(&cur, &recon, reference.as_ref(), y0, x0, cfg, &candidates);
                let top = (y0 > 0).then(|| block_rows[y0 / b - 1][x0 / b]);
                let left = (x0 > 0).then(|| row[x0 / b - 1]);
                let pred = bordered_prediction(tape, d.mode, top, left, prev.as_ref().map(|p| p.0), (y0, x0), (h, w), b)?;

                let src = tape.crop2d(frame, y0, x0, b, b)?;
                let residual = tape.sub(src, pred)?;
                let residual = tape.scale(residual, 255.0);
                let coeffs = tape.dct8_tiles(residual, false)?;
                let q = quantize(tape, coeffs, step, cfg.quant_mode, rng);
                q_blocks.push(q);
                let deq = dequantize(tape, q, step);
                let rres = tape.dct8_tiles(deq, true)?;
                let rres = tape.scale(rres, 1.0 / 255.0);
                let sum = tape.add(pred, rres)?;
                let rec = tape.clamp01(sum);

                let vals = tape.value(rec).data();
                for y in 0..b {
                    recon_vals[(y0 + y) * w + x0..(y0 + y) * w + x0 + b].copy_from_slice(&vals[y * b..(y + 1) * b]);
                }
                row.push(rec);
                decisions.push(d);
            }
            block_rows.push(row);
        }
        let rows = block_rows
            .iter()
            .map(|r| tape.concat(r, 1))
            .collect::<Result<Vec<_>, _>>()?;
        let frame_recon = tape.concat(&rows, 0)?;
        frames.push(tape.reshape(frame_recon, &[1, h, w])?);
        side_info.frames.push(decisions);
        prev = Some((frame_recon, recon_vals));
    }

    let recon = tape.concat(&frames, 0)?;
    let stacked = tape.concat(&q_blocks, 0)?;
    let (index, n) = symbol_index(q_blocks.len(), b);
    let symbols = tape.gather(stacked, index, &[NUM_CHANNELS, n])?;
    let bits = tape.entropy_bits(symbols, entropy_params)?;
    let pixels = (t * h * w) as f64;
    let bpp = tape.scale(bits, (1.0 / pixels) as f32);
    let distortion = tape.mse(recon, source)?;

    let model = EntropyModel::from_tensor(tape.value(entropy_params).clone())?;
    let bits_f64 = model.bits(tape.value(symbols))?;
    let distortion_f64 = tape
        .value(recon)
        .data()
        .iter()
        .zip(tape.value(source).data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / pixels;
    Ok(TapeRd {
        recon,
        symbols,
        bits,
        bpp,
        distortion,
        side_info,
        bits_f64,
        distortion_f64,
    })
}

/// Value-only encode of a luma clip; distortion is against the clip itself.
/// `noise_seed` drives noise-mode quantization.
pub fn virtual_encode(
    clip: &VideoClip,
    cfg: &VirtualCodecConfig,
    model: &EntropyModel,
    noise_seed: u64,
) -> Result<RDResult, CodecError> {
    if clip.layout() != crate::video::Layout::Luma {
        return Err(CodecError::NotLuma);
    }
    let mut tape = Tape::new();
    let x = tape.constant(clip.luma_tensor().expect("luma clip"));
    let params = tape.constant(model.params().clone());
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let rd = encode_on_tape(&mut tape, x, x, params, cfg, &mut rng)?;
    let recon = VideoClip::from_tensor(tape.value(rd.recon)).expect("recon geometry");
    Ok(RDResult {
        distortion: rd.distortion_f64,
        rate: rd.bits_f64,
        bpp: rd.bits_f64 / clip.num_pixels() as f64,
        recon,
        side_info: rd.side_info,
        symbols: tape.value(rd.symbols).clone(),
    })
}

/// Quantized symbols (`[64, N]`, round mode) of every clip at every `f_q`
/// with the block settings of `base`, concatenated along N. Used to fit an
/// entropy model to codec statistics.
pub fn collect_symbols(clips: &[VideoClip], base: &VirtualCodecConfig, f_qs: &[f32]) -> Result<Tensor, CodecError> {
    let model = EntropyModel::default();
    let mut rows: Vec<Vec<f32>> = vec![Vec::new(); NUM_CHANNELS];
    for clip in clips {
        for &f_q in f_qs {
            let cfg = VirtualCodecConfig {
                f_q,
                quant_mode: super::QuantMode::Round,
                ..base.clone()
            };
            let mut tape = Tape::new();
            let x = tape.constant(clip.luma_tensor().map_err(|_| CodecError::NotLuma)?);
            let params = tape.constant(model.params().clone());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let rd = encode_on_tape(&mut tape, x, x, params, &cfg, &mut rng)?;
            let s = tape.value(rd.symbols);
            let n = s.shape()[1];
            for (c, row) in rows.iter_mut().enumerate() {
                row.extend_from_slice(&s.data()[c * n..(c + 1) * n]);
            }
        }
    }
    let n = rows[0].len();
    Ok(Tensor::new(vec![NUM_CHANNELS, n], rows.concat())?)
}
