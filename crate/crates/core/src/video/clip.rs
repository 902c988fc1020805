use super::VideoError;
use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Luma,
    Yuv420,
    Rgb,
}

impl Layout {
    pub fn num_planes(self) -> usize {
        match self {
            Layout::Luma => 1,
            Layout::Yuv420 | Layout::Rgb => 3,
        }
    }
}

/// `T` frames of `H x W` samples in `[0, 1]`.
///
/// Each plane stores all frames back to back (`[T, h_p, w_p]`); for YUV420 the
/// chroma planes are half size in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    layout: Layout,
    width: usize,
    height: usize,
    num_frames: usize,
    planes: Vec<Vec<f32>>,
}

impl VideoClip {
    pub fn new(
        layout: Layout,
        width: usize,
        height: usize,
        num_frames: usize,
        planes: Vec<Vec<f32>>,
    ) -> Result<Self, VideoError> {
        if num_frames == 0 || width == 0 || height == 0 {
            return Err(VideoError::Geometry(format!("{num_frames} frames of {width}x{height}")));
        }
        if layout == Layout::Yuv420 && (!width.is_multiple_of(2) || !height.is_multiple_of(2)) {
            return Err(VideoError::OddDimensions { width, height });
        }
        if planes.len() != layout.num_planes() {
            return Err(VideoError::Geometry(format!("{:?} expects {} planes", layout, layout.num_planes())));
        }
        let clip = Self {
            layout,
            width,
            height,
            num_frames,
            planes,
        };
        for p in 0..clip.planes.len() {
            let (w, h) = clip.plane_dims(p);
            if clip.planes[p].len() != w * h * num_frames {
                return Err(VideoError::Geometry(format!(
                    "plane {p} has {} samples, expected {}",
                    clip.planes[p].len(),
                    w * h * num_frames
                )));
            }
            if let Some(v) = clip.planes[p].iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(VideoError::OutOfRange(*v));
            }
        }
        Ok(clip)
    }

    pub fn luma(num_frames: usize, height: usize, width: usize, samples: Vec<f32>) -> Result<Self, VideoError> {
        Self::new(Layout::Luma, width, height, num_frames, vec![samples])
    }

    /// Luma clip from a `[T, H, W]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self, VideoError> {
        let [n, h, w] = t.shape()[..] else {
            return Err(VideoError::Geometry(format!("expected [T, H, W], got {:?}", t.shape())));
        };
        let data = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::luma(n, h, w, data)
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height * self.num_frames
    }

    /// (width, height) of plane `p`.
    pub fn plane_dims(&self, p: usize) -> (usize, usize) {
        if self.layout == Layout::Yuv420 && p > 0 {
            (self.width.div_ceil(2), self.height.div_ceil(2))
        } else {
            (self.width, self.height)
        }
    }

    pub fn plane(&self, p: usize) -> &[f32] {
        &self.planes[p]
    }

    pub fn planes(&self) -> &[Vec<f32>] {
        &self.planes
    }

    /// Samples of plane `p` in frame `t`.
    pub fn frame_plane(&self, p: usize, t: usize) -> &[f32] {
        let (w, h) = self.plane_dims(p);
        &self.planes[p][t * w * h..(t + 1) * w * h]
    }

    /// Luma-only view of this clip (Y plane for YUV420, BT.601 luma for RGB).
    pub fn to_luma(&self) -> VideoClip {
        match self.layout {
            Layout::Luma => self.clone(),
            Layout::Yuv420 => Self {
                layout: Layout::Luma,
                width: self.width,
                height: self.height,
                num_frames: self.num_frames,
                planes: vec![self.planes[0].clone()],
            },
            Layout::Rgb => {
                let y = super::color::rgb_to_yuv420_luma(self);
                Self {
                    layout: Layout::Luma,
                    width: self.width,
                    height: self.height,
                    num_frames: self.num_frames,
                    planes: vec![y],
                }
            }
        }
    }

    /// YUV420 clip with this luma and neutral (0.5) chroma.
    pub fn with_neutral_chroma(&self) -> Result<VideoClip, VideoError> {
        if self.layout != Layout::Luma {
            return Err(VideoError::LayoutMismatch {
                expected: Layout::Luma,
                found: self.layout,
            });
        }
        let cw = self.width.div_ceil(2);
        let ch = self.height.div_ceil(2);
        let chroma = vec![0.5; cw * ch * self.num_frames];
        Self::new(
            Layout::Yuv420,
            self.width,
            self.height,
            self.num_frames,
            vec![self.planes[0].clone(), chroma.clone(), chroma],
        )
    }

    /// `[T, H, W]` tensor of the luma plane.
    pub fn luma_tensor(&self) -> Result<Tensor, VideoError> {
        if self.layout != Layout::Luma {
            return Err(VideoError::LayoutMismatch {
                expected: Layout::Luma,
                found: self.layout,
            });
        }
        Ok(Tensor::new(vec![self.num_frames, self.height, self.width], self.planes[0].clone())
            .expect("clip geometry is validated"))
    }
}

/// Class index in `[0, num_classes)` attached to a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub clip: VideoClip,
    pub label: usize,
}
