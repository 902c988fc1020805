//! Full-range BT.601 conversion between RGB and YUV 4:2:0.
//!
//! Chroma is downsampled with a 2x2 box average and upsampled by
//! nearest neighbour, so constant regions survive a round trip exactly.

use super::{Layout, VideoClip, VideoError};

const KR: f32 = 0.299;
const KG: f32 = 0.587;
const KB: f32 = 0.114;

fn expect(clip: &VideoClip, layout: Layout) -> Result<(), VideoError> {
    if clip.layout() != layout {
        return Err(VideoError::LayoutMismatch {
            expected: layout,
            found: clip.layout(),
        });
    }
    Ok(())
}

pub(crate) fn rgb_to_yuv420_luma(clip: &VideoClip) -> Vec<f32> {
    let (r, g, b) = (clip.plane(0), clip.plane(1), clip.plane(2));
    (0..r.len())
        .map(|i| (KR * r[i] + KG * g[i] + KB * b[i]).clamp(0.0, 1.0))
        .collect()
}

pub fn rgb_to_yuv420(clip: &VideoClip) -> Result<VideoClip, VideoError> {
    expect(clip, Layout::Rgb)?;
    let (w, h) = (clip.width(), clip.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(VideoError::OddDimensions { width: w, height: h });
    }
    let (cw, ch) = (w / 2, h / 2);
    let y = rgb_to_yuv420_luma(clip);
    let mut u = Vec::with_capacity(cw * ch * clip.num_frames());
    let mut v = Vec::with_capacity(cw * ch * clip.num_frames());
    for t in 0..clip.num_frames() {
        let (r, g, b) = (clip.frame_plane(0, t), clip.frame_plane(1, t), clip.frame_plane(2, t));
        for cy in 0..ch {
            for cx in 0..cw {
                let (mut su, mut sv) = (0f32, 0f32);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = (2 * cy + dy) * w + 2 * cx + dx;
                    let luma = KR * r[i] + KG * g[i] + KB * b[i];
                    su += (b[i] - luma) / (2.0 * (1.0 - KB));
                    sv += (r[i] - luma) / (2.0 * (1.0 - KR));
                }
                u.push((su / 4.0 + 0.5).clamp(0.0, 1.0));
                v.push((sv / 4.0 + 0.5).clamp(0.0, 1.0));
            }
        }
    }
    VideoClip::new(Layout::Yuv420, w, h, clip.num_frames(), vec![y, u, v])
}

pub fn yuv420_to_rgb(clip: &VideoClip) -> Result<VideoClip, VideoError> {
    expect(clip, Layout::Yuv420)?;
    let (w, h) = (clip.width(), clip.height());
    let cw = w / 2;
    let n = w * h * clip.num_frames();
    let (mut r, mut g, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for t in 0..clip.num_frames() {
        let (yp, up, vp) = (clip.frame_plane(0, t), clip.frame_plane(1, t), clip.frame_plane(2, t));
        for y in 0..h {
            for x in 0..w {
                let luma = yp[y * w + x];
                let cu = up[(y / 2) * cw + x / 2] - 0.5;
                let cv = vp[(y / 2) * cw + x / 2] - 0.5;
                let red = luma + 2.0 * (1.0 - KR) * cv;
                let blue = luma + 2.0 * (1.0 - KB) * cu;
                let green = (luma - KR * red - KB * blue) / KG;
                r.push(red.clamp(0.0, 1.0));
                g.push(green.clamp(0.0, 1.0));
                b.push(blue.clamp(0.0, 1.0));
            }
        }
    }
    VideoClip::new(Layout::Rgb, w, h, clip.num_frames(), vec![r, g, b])
}
