//! Raw video I/O, color conversion and the synthetic labeled dataset.

mod clip;
pub mod color;
pub mod dataset;
pub mod synth;
pub mod y4m;

pub use clip::{LabeledClip, Layout, VideoClip};
pub use color::{rgb_to_yuv420, yuv420_to_rgb};
pub use dataset::{read_manifest, write_manifest};
pub use synth::{standard_clip, synth_dataset, Split};
pub use y4m::{encode_y4m, parse_y4m, read_y4m, read_yuv420_raw, write_y4m, write_yuv420_raw};

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing YUV4MPEG2 magic")]
    BadMagic,
    #[error("unsupported colorspace C{0}")]
    UnsupportedColorspace(String),
    #[error("invalid Y4M header: {0}")]
    InvalidHeader(String),
    #[error("truncated payload in frame {frame}")]
    Truncated { frame: usize },
    #[error("4:2:0 requires even dimensions, got {width}x{height}")]
    OddDimensions { width: usize, height: usize },
    #[error("sample {0} outside [0, 1]")]
    OutOfRange(f32),
    #[error("bad clip geometry: {0}")]
    Geometry(String),
    #[error("expected {expected:?} layout, found {found:?}")]
    LayoutMismatch { expected: Layout, found: Layout },
    #[error("manifest: {0}")]
    Manifest(String),
}

impl VideoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
