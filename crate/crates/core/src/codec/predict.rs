//! Block mode decision: integer full-search motion estimation against the
//! reference frame plus DC / horizontal / vertical intra prediction from the
//! causal reconstructed border. Decisions are made on values only; the
//! encoder replays the chosen branch on the tape.

use super::{CodecError, VirtualCodecConfig};
use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PredMode {
    /// `pred(y, x) = ref(y - dy, x - dx)`: content that moved right by 3
    /// pixels has `dx = 3`.
    Inter { dx: i32, dy: i32 },
    Dc,
    Horizontal,
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockDecision {
    /// Top-left pixel of the block.
    pub y: usize,
    pub x: usize,
    pub mode: PredMode,
    pub sad: f32,
}

/// Per-frame block decisions in raster order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SideInfo {
    pub frames: Vec<Vec<BlockDecision>>,
}

/// Displacements ordered by `(|dy| + |dx|, dy, dx)`; ties in SAD keep the
/// earliest candidate.
pub(crate) fn motion_candidates(range: usize) -> Vec<(i32, i32)> {
    let r = range as i32;
    let mut c: Vec<(i32, i32)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect();
    c.sort_by_key(|&(dy, dx)| (dy.abs() + dx.abs(), dy, dx));
    c
}

/// A frame being predicted: `w` columns, row-major.
pub(crate) struct FrameView<'a> {
    pub data: &'a [f32],
    pub w: usize,
    pub h: usize,
}

impl FrameView<'_> {
    fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }
}

fn block_sad(cur: &FrameView, y0: usize, x0: usize, b: usize, mut pred: impl FnMut(usize, usize) -> f32) -> f32 {
    let mut sad = 0f64;
    for y in 0..b {
        for x in 0..b {
            sad += (cur.at(y0 + y, x0 + x) - pred(y, x)).abs() as f64;
        }
    }
    sad as f32
}

/// Source offset of an inter candidate if the whole block lies inside the frame.
pub(crate) fn inter_origin(y0: usize, x0: usize, dy: i32, dx: i32, b: usize, w: usize, h: usize) -> Option<(usize, usize)> {
    let sy = y0 as i64 - dy as i64;
    let sx = x0 as i64 - dx as i64;
    if sy < 0 || sx < 0 || sy as usize + b > h || sx as usize + b > w {
        return None;
    }
    Some((sy as usize, sx as usize))
}

/// Mean of the available causal border of the block, or 0.5.
pub(crate) fn dc_value(recon: &FrameView, y0: usize, x0: usize, b: usize) -> f32 {
    let mut sum = 0f64;
    let mut n = 0;
    if y0 > 0 {
        sum += (0..b).map(|x| recon.at(y0 - 1, x0 + x) as f64).sum::<f64>();
        n += b;
    }
    if x0 > 0 {
        sum += (0..b).map(|y| recon.at(y0 + y, x0 - 1) as f64).sum::<f64>();
        n += b;
    }
    if n == 0 {
        0.5
    } else {
        (sum / n as f64) as f32
    }
}

/// Chooses the minimum-SAD mode for the block at `(y0, x0)`. `recon` holds
/// the reconstructed (or, open loop, original) current frame up to this block.
pub(crate) fn decide_block(
    cur: &FrameView,
    recon: &FrameView,
    reference: Option<&FrameView>,
    y0: usize,
    x0: usize,
    cfg: &VirtualCodecConfig,
    candidates: &[(i32, i32)],
) -> BlockDecision {
    let b = cfg.pred_block;
    let mut best = BlockDecision {
        y: y0,
        x: x0,
        mode: PredMode::Dc,
        sad: f32::INFINITY,
    };
    let mut offer = |mode: PredMode, sad: f32| {
        if sad < best.sad {
            best.mode = mode;
            best.sad = sad;
        }
    };
    if let Some(r) = reference {
        for &(dy, dx) in candidates {
            if let Some((sy, sx)) = inter_origin(y0, x0, dy, dx, b, cur.w, cur.h) {
                let sad = block_sad(cur, y0, x0, b, |y, x| r.at(sy + y, sx + x));
                offer(PredMode::Inter { dx, dy }, sad);
            }
        }
    }
    let dc = dc_value(recon, y0, x0, b);
    offer(PredMode::Dc, block_sad(cur, y0, x0, b, |_, _| dc));
    if x0 > 0 {
        offer(PredMode::Horizontal, block_sad(cur, y0, x0, b, |y, _| recon.at(y0 + y, x0 - 1)));
    }
    if y0 > 0 {
        offer(PredMode::Vertical, block_sad(cur, y0, x0, b, |_, x| recon.at(y0 - 1, x0 + x)));
    }
    best
}

/// Prediction samples of a decided block.
pub(crate) fn block_prediction(
    d: &BlockDecision,
    recon: &FrameView,
    reference: Option<&FrameView>,
    b: usize,
) -> Vec<f32> {
    let (y0, x0) = (d.y, d.x);
    let mut out = Vec::with_capacity(b * b);
    for y in 0..b {
        for x in 0..b {
            out.push(match d.mode {
                PredMode::Inter { dx, dy } => {
                    let r = reference.expect("inter mode requires a reference");
                    let (sy, sx) = inter_origin(y0, x0, dy, dx, b, recon.w, recon.h).expect("valid candidate");
                    r.at(sy + y, sx + x)
                }
                PredMode::Dc => dc_value(recon, y0, x0, b),
                PredMode::Horizontal => recon.at(y0 + y, x0 - 1),
                PredMode::Vertical => recon.at(y0 - 1, x0 + x),
            });
        }
    }
    out
}

pub(crate) fn check_aligned(w: usize, h: usize, block: usize) -> Result<(), CodecError> {
    if w == 0 || h == 0 || !w.is_multiple_of(block) || !h.is_multiple_of(block) {
        return Err(CodecError::NotBlockAligned {
            width: w,
            height: h,
            block,
        });
    }
    Ok(())
}

/// Open-loop prediction of one `[H, W]` frame: intra neighbours come from
/// `current` itself, inter candidates from `reference`.
pub fn predict_frame(
    current: &Tensor,
    reference: Option<&Tensor>,
    cfg: &VirtualCodecConfig,
) -> Result<(Tensor, Vec<BlockDecision>), CodecError> {
    cfg.validate()?;
    let [h, w] = current.shape()[..] else {
        return Err(CodecError::Config(format!("expected an [H, W] frame, got {:?}", current.shape())));
    };
    if let Some(r) = reference {
        if r.shape() != current.shape() {
            let s = r.shape();
            return Err(CodecError::SizeMismatch {
                expected: (w, h),
                found: (*s.get(1).unwrap_or(&0), s[0]),
            });
        }
    }
    check_aligned(w, h, cfg.pred_block)?;
    let b = cfg.pred_block;
    let cur = FrameView {
        data: current.data(),
        w,
        h,
    };
    let refv = reference.map(|r| FrameView { data: r.data(), w, h });
    let candidates = motion_candidates(cfg.search_range);
    let mut pred = vec![0f32; w * h];
    let mut decisions = Vec::new();
    for y0 in (0..h).step_by(b) {
        for x0 in (0..w).step_by(b) {
            let d = decide_block(&cur, &cur, refv.as_ref(), y0, x0, cfg, &candidates);
            let p = block_prediction(&d, &cur, refv.as_ref(), b);
            for y in 0..b {
                pred[(y0 + y) * w + x0..(y0 + y) * w + x0 + b].copy_from_slice(&p[y * b..(y + 1) * b]);
            }
            decisions.push(d);
        }
    }
    Ok((Tensor::new(vec![h, w], pred)?, decisions))
}
