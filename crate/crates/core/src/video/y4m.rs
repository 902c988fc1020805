//! YUV4MPEG2 streams and headerless planar YUV420 files, 8-bit 4:2:0 only.

use std::fs;
use std::path::Path;

use super::{Layout, VideoClip, VideoError};

const MAGIC: &[u8] = b"YUV4MPEG2";
const FRAME: &[u8] = b"FRAME";

pub(crate) fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub(crate) fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0
}

fn read_line(data: &[u8], pos: usize) -> Result<(&[u8], usize), VideoError> {
    let rest = &data[pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| VideoError::InvalidHeader("missing newline".into()))?;
    Ok((&rest[..end], pos + end + 1))
}

/// Parses an in-memory Y4M stream into a YUV420 clip.
pub fn parse_y4m(data: &[u8]) -> Result<VideoClip, VideoError> {
    if !data.starts_with(MAGIC) {
        return Err(VideoError::BadMagic);
    }
    let (header, mut pos) = read_line(data, 0)?;
    let header = std::str::from_utf8(header).map_err(|_| VideoError::InvalidHeader("not ASCII".into()))?;
    let (mut width, mut height) = (None, None);
    for token in header.split_ascii_whitespace().skip(1) {
        let (tag, value) = token.split_at(1);
        match tag {
            "W" => width = value.parse::<usize>().ok(),
            "H" => height = value.parse::<usize>().ok(),
            "C"
                if !matches!(value, "420" | "420jpeg" | "420mpeg2" | "420paldv") => {
                    return Err(VideoError::UnsupportedColorspace(value.to_string()));
                }
            _ => {}
        }
    }
    let (Some(width), Some(height)) = (width, height) else {
        return Err(VideoError::InvalidHeader(format!("missing W/H in {header:?}")));
    };
    if width == 0 || height == 0 {
        return Err(VideoError::InvalidHeader(format!("{width}x{height}")));
    }
    if width % 2 != 0 || height % 2 != 0 {
        return Err(VideoError::OddDimensions { width, height });
    }

    let luma_len = width * height;
    let chroma_len = (width / 2) * (height / 2);
    let mut planes = vec![Vec::new(), Vec::new(), Vec::new()];
    let mut frames = 0;
    while pos < data.len() {
        if !data[pos..].starts_with(FRAME) {
            return Err(VideoError::InvalidHeader(format!("expected FRAME at byte {pos}")));
        }
        let (_, next) = read_line(data, pos).map_err(|_| VideoError::Truncated { frame: frames })?;
        pos = next;
        let need = luma_len + 2 * chroma_len;
        if data.len() - pos < need {
            return Err(VideoError::Truncated { frame: frames });
        }
        let payload = &data[pos..pos + need];
        planes[0].extend(payload[..luma_len].iter().map(|&b| from_byte(b)));
        planes[1].extend(payload[luma_len..luma_len + chroma_len].iter().map(|&b| from_byte(b)));
        planes[2].extend(payload[luma_len + chroma_len..].iter().map(|&b| from_byte(b)));
        pos += need;
        frames += 1;
    }
    if frames == 0 {
        return Err(VideoError::Truncated { frame: 0 });
    }
    VideoClip::new(Layout::Yuv420, width, height, frames, planes)
}

pub fn read_y4m(path: &Path) -> Result<VideoClip, VideoError> {
    let data = fs::read(path).map_err(|e| VideoError::io(path, e))?;
    parse_y4m(&data)
}

/// 8-bit 4:2:0 payload of frame `t` (Y, then U, then V).
fn frame_payload(clip: &VideoClip, t: usize, out: &mut Vec<u8>) -> Result<(), VideoError> {
    match clip.layout() {
        Layout::Yuv420 => {
            for p in 0..3 {
                out.extend(clip.frame_plane(p, t).iter().map(|&v| to_byte(v)));
            }
        }
        Layout::Luma => {
            out.extend(clip.frame_plane(0, t).iter().map(|&v| to_byte(v)));
            let chroma = (clip.width() / 2) * (clip.height() / 2);
            out.extend(std::iter::repeat_n(to_byte(0.5), 2 * chroma));
        }
        Layout::Rgb => {
            return Err(VideoError::LayoutMismatch {
                expected: Layout::Yuv420,
                found: Layout::Rgb,
            })
        }
    }
    Ok(())
}

/// Serializes a YUV420 or luma-only clip (luma-only gets neutral chroma).
pub fn encode_y4m(clip: &VideoClip) -> Result<Vec<u8>, VideoError> {
    if !clip.width().is_multiple_of(2) || !clip.height().is_multiple_of(2) {
        return Err(VideoError::OddDimensions {
            width: clip.width(),
            height: clip.height(),
        });
    }
    let mut out = format!("YUV4MPEG2 W{} H{} F25:1 Ip A1:1 C420\n", clip.width(), clip.height()).into_bytes();
    for t in 0..clip.num_frames() {
        out.extend_from_slice(b"FRAME\n");
        frame_payload(clip, t, &mut out)?;
    }
    Ok(out)
}

pub fn write_y4m(clip: &VideoClip, path: &Path) -> Result<(), VideoError> {
    let bytes = encode_y4m(clip)?;
    fs::write(path, bytes).map_err(|e| VideoError::io(path, e))
}

/// Reads a headerless planar YUV420 file of known geometry.
pub fn read_yuv420_raw(path: &Path, width: usize, height: usize) -> Result<VideoClip, VideoError> {
    if !width.is_multiple_of(2) || !height.is_multiple_of(2) || width == 0 || height == 0 {
        return Err(VideoError::OddDimensions { width, height });
    }
    let data = fs::read(path).map_err(|e| VideoError::io(path, e))?;
    let luma_len = width * height;
    let frame_len = luma_len + luma_len / 2;
    if data.is_empty() || data.len() % frame_len != 0 {
        return Err(VideoError::Truncated {
            frame: data.len() / frame_len,
        });
    }
    let frames = data.len() / frame_len;
    let mut planes = vec![Vec::new(), Vec::new(), Vec::new()];
    for f in data.chunks_exact(frame_len) {
        planes[0].extend(f[..luma_len].iter().map(|&b| from_byte(b)));
        planes[1].extend(f[luma_len..luma_len + luma_len / 4].iter().map(|&b| from_byte(b)));
        planes[2].extend(f[luma_len + luma_len / 4..].iter().map(|&b| from_byte(b)));
    }
    VideoClip::new(Layout::Yuv420, width, height, frames, planes)
}

pub fn write_yuv420_raw(clip: &VideoClip, path: &Path) -> Result<(), VideoError> {
    let mut out = Vec::new();
    for t in 0..clip.num_frames() {
        frame_payload(clip, t, &mut out)?;
    }
    fs::write(path, out).map_err(|e| VideoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(header: &str, frames: usize, frame_len: usize, fill: u8) -> Vec<u8> {
        let mut data = format!("{header}\n").into_bytes();
        for _ in 0..frames {
            data.extend_from_slice(b"FRAME\n");
            data.extend(std::iter::repeat_n(fill, frame_len));
        }
        data
    }

    #[test]
    fn header_geometry_and_frame_count() {
        let data = stream("YUV4MPEG2 W64 H64 F25:1 Ip A1:1 C420", 8, 64 * 64 * 3 / 2, 0);
        let clip = parse_y4m(&data).unwrap();
        assert_eq!((clip.num_frames(), clip.width(), clip.height()), (8, 64, 64));
        assert!(clip.plane(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn colorspace_tag_optional_and_checked() {
        let data = stream("YUV4MPEG2 W4 H2", 1, 12, 10);
        assert_eq!(parse_y4m(&data).unwrap().num_frames(), 1);
        let data = stream("YUV4MPEG2 W4 H2 C420jpeg", 1, 12, 10);
        assert!(parse_y4m(&data).is_ok());
        let data = stream("YUV4MPEG2 W4 H2 C444", 1, 48, 10);
        assert!(matches!(parse_y4m(&data), Err(VideoError::UnsupportedColorspace(c)) if c == "444"));
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(parse_y4m(b"RIFF1234\n"), Err(VideoError::BadMagic)));
        let mut data = stream("YUV4MPEG2 W4 H2 C420", 2, 12, 10);
        data.truncate(data.len() - 3);
        assert!(matches!(parse_y4m(&data), Err(VideoError::Truncated { frame: 1 })));
    }

    #[test]
    fn half_gray_writes_128() {
        let clip = VideoClip::luma(1, 2, 2, vec![0.5; 4]).unwrap();
        let bytes = encode_y4m(&clip).unwrap();
        let payload = &bytes[bytes.len() - 6..];
        assert_eq!(payload, &[128; 6]);
    }

    #[test]
    fn file_size_matches_layout() {
        let clip = VideoClip::luma(8, 64, 64, vec![0.25; 8 * 64 * 64]).unwrap();
        let bytes = encode_y4m(&clip).unwrap();
        let header_rest = "W64 H64 F25:1 Ip A1:1 C420\n".len();
        assert_eq!(bytes.len(), 10 + 8 * (6 + 64 * 64 * 3 / 2) + header_rest);
    }

    #[test]
    fn payload_roundtrip_is_byte_exact() {
        let mut data = b"YUV4MPEG2 W4 H2 F30000:1001 Ip A1:1 C420\n".to_vec();
        for f in 0..3u8 {
            data.extend_from_slice(b"FRAME\n");
            data.extend((0..12u8).map(|i| i.wrapping_mul(37).wrapping_add(f * 91)));
        }
        let clip = parse_y4m(&data).unwrap();
        let out = encode_y4m(&clip).unwrap();
        let payload = |b: &[u8]| {
            let start = b.iter().position(|&c| c == b'\n').unwrap() + 1;
            b[start..].to_vec()
        };
        assert_eq!(payload(&data), payload(&out));
    }

    #[test]
    fn raw_yuv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.yuv");
        let y: Vec<f32> = (0..2 * 4 * 4).map(|i| (i % 7) as f32 / 7.0).collect();
        let clip = VideoClip::luma(2, 4, 4, y).unwrap().with_neutral_chroma().unwrap();
        write_yuv420_raw(&clip, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 2 * 24);
        let back = read_yuv420_raw(&path, 4, 4).unwrap();
        for (a, b) in back.plane(0).iter().zip(clip.plane(0)) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert!(read_yuv420_raw(&path, 4, 6).is_err());
    }
}
