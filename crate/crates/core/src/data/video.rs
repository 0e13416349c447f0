//! Depth videos and the DVID container.
//!
//! DVID layout (little-endian): `"DVID"`, version `u16`, width `u16`,
//! height `u16`, flags `u16` (zero), frame count `u32`, reserved `u32`,
//! then every frame row-major as `u16` depth values. The header is 20 bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const DVID_VERSION: u16 = 1;
pub const DVID_HEADER_LEN: usize = 20;
const MAGIC: &[u8; 4] = b"DVID";

/// A depth video: `frames` holds `len × height × width` values in
/// millimeters, with 0 meaning background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoSample {
    pub frames: Vec<u16>,
    pub len: usize,
    pub height: usize,
    pub width: usize,
    pub label: usize,
    pub subject: u32,
    pub camera: u32,
}

impl VideoSample {
    pub fn new(frames: Vec<u16>, len: usize, height: usize, width: usize) -> Result<Self> {
        if len == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("video extents must be positive"));
        }
        if frames.len() != len * height * width {
            return Err(Error::shape("video", "frames", len * height * width, frames.len()));
        }
        Ok(VideoSample {
            frames,
            len,
            height,
            width,
            label: 0,
            subject: 0,
            camera: 0,
        })
    }

    pub fn with_meta(mut self, label: usize, subject: u32, camera: u32) -> Self {
        self.label = label;
        self.subject = subject;
        self.camera = camera;
        self
    }

    pub fn frame(&self, i: usize) -> &[u16] {
        let n = self.height * self.width;
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn pixel(&self, t: usize, r: usize, c: usize) -> u16 {
        self.frames[(t * self.height + r) * self.width + c]
    }
}

pub fn encode_video(video: &VideoSample) -> Result<Vec<u8>> {
    let w = u16::try_from(video.width).map_err(|_| Error::invalid("width exceeds u16"))?;
    let h = u16::try_from(video.height).map_err(|_| Error::invalid("height exceeds u16"))?;
    let n = u32::try_from(video.len).map_err(|_| Error::invalid("frame count exceeds u32"))?;
    let mut out = Vec::with_capacity(DVID_HEADER_LEN + video.frames.len() * 2);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DVID_VERSION.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in &video.frames {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a DVID byte stream. Label, subject and camera are left at zero;
/// they live in the manifest.
pub fn decode_video(buf: &[u8]) -> Result<VideoSample> {
    let fail = |offset: usize, message: &str| Error::Format {
        offset: offset as u64,
        message: message.into(),
    };
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(fail(0, "bad magic, expected \"DVID\""));
    }
    if buf.len() < DVID_HEADER_LEN {
        return Err(fail(buf.len(), "truncated header"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([buf[o], buf[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let version = u16_at(4);
    if version != DVID_VERSION {
        return Err(Error::VersionMismatch {
            expected: DVID_VERSION,
            found: version,
        });
    }
    let (width, height, len) = (u16_at(6) as usize, u16_at(8) as usize, u32_at(12) as usize);
    if width == 0 || height == 0 || len == 0 {
        return Err(fail(6, "zero extent"));
    }
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(len))
        .filter(|n| n.checked_mul(2).is_some())
        .ok_or_else(|| fail(6, "extent overflow"))?;
    let body = &buf[DVID_HEADER_LEN..];
    if body.len() < count * 2 {
        return Err(fail(buf.len(), "truncated frame data"));
    }
    if body.len() > count * 2 {
        return Err(fail(DVID_HEADER_LEN + count * 2, "trailing bytes after frame data"));
    }
    let frames = body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    VideoSample::new(frames, len, height, width)
}

pub fn load_video(path: impl AsRef<Path>) -> Result<VideoSample> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::at_path(path))?;
    decode_video(&bytes)
}

pub fn store_video(video: &VideoSample, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_video(video)?)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(Error::at_path(&tmp))?;
    f.write_all(bytes).map_err(Error::at_path(&tmp))?;
    f.sync_all().map_err(Error::at_path(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(Error::at_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VideoSample {
        VideoSample::new((0..2 * 3 * 5).map(|v| v as u16 * 150).collect(), 2, 3, 5).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.dvid");
        let v = sample();
        store_video(&v, &path).unwrap();
        assert_eq!(load_video(&path).unwrap(), v);
    }

    #[test]
    fn file_size_follows_header_and_extents() {
        let v = VideoSample::new(vec![7; 300 * 512 * 424], 300, 424, 512).unwrap();
        assert_eq!(encode_video(&v).unwrap().len(), 20 + 300 * 512 * 424 * 2);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = encode_video(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        match decode_video(&bad) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            decode_video(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        assert!(matches!(decode_video(&bytes[..10]), Err(Error::Format { .. })));

        let mut huge = bytes.clone();
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[6..8].copy_from_slice(&u16::MAX.to_le_bytes());
        huge[8..10].copy_from_slice(&u16::MAX.to_le_bytes());
        assert!(matches!(decode_video(&huge), Err(Error::Format { .. })));
    }
}
