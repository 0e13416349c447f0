//! Foreground crop, bilinear resize and depth normalization.

use rayon::prelude::*;

use super::video::VideoSample;
use crate::error::{Error, Result};

/// Default depth normalization constant in millimeters.
pub const MAX_DEPTH: f64 = 4500.0;

/// Fractional margin added around the foreground box on each side.
pub const CROP_MARGIN: f64 = 0.05;

/// Inclusive pixel box `rows.0..=rows.1 × cols.0..=cols.1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

/// Union bounding box of nonzero pixels over all frames, widened by
/// [`CROP_MARGIN`] of its extent and clamped to the frame.
pub fn foreground_box(video: &VideoSample) -> Result<CropBox> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for t in 0..video.len {
        for (i, &v) in video.frame(t).iter().enumerate() {
            if v != 0 {
                let (r, c) = (i / video.width, i % video.width);
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(Error::EmptyVideo);
    }
    let grow = |lo: usize, hi: usize, limit: usize| {
        let m = (CROP_MARGIN * (hi - lo + 1) as f64).ceil() as usize;
        (lo.saturating_sub(m), (hi + m).min(limit - 1))
    };
    Ok(CropBox {
        rows: grow(r0, r1, video.height),
        cols: grow(c0, c1, video.width),
    })
}

pub fn crop_foreground(video: &VideoSample) -> Result<VideoSample> {
    let b = foreground_box(video)?;
    let (h, w) = (b.rows.1 - b.rows.0 + 1, b.cols.1 - b.cols.0 + 1);
    let mut frames = Vec::with_capacity(video.len * h * w);
    for t in 0..video.len {
        let f = video.frame(t);
        for r in b.rows.0..=b.rows.1 {
            frames.extend_from_slice(&f[r * video.width + b.cols.0..=r * video.width + b.cols.1]);
        }
    }
    Ok(VideoSample::new(frames, video.len, h, w)?.with_meta(video.label, video.subject, video.camera))
}

/// Bilinear resize with half-pixel centers; equal sizes give the identity.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let axis = |n: usize, on: usize| -> Vec<(usize, usize, f32)> {
        let scale = n as f64 / on as f64;
        (0..on)
            .map(|o| {
                let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                (lo, hi, (x - lo as f64) as f32)
            })
            .collect()
    };
    let rows = axis(h, oh);
    let cols = axis(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bottom = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Resizes one frame to `size × size` and divides by `max_depth`.
pub fn preprocess_frame(frame: &[u16], h: usize, w: usize, size: usize, max_depth: f64) -> Vec<f32> {
    let src: Vec<f32> = frame.iter().map(|&v| v as f32).collect();
    let scale = (1.0 / max_depth) as f32;
    let mut out = resize_bilinear(&src, h, w, size, size);
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// A cropped, resized and normalized video ready to be windowed.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedVideo {
    /// `len × size × size`
    pub frames: Vec<f32>,
    pub len: usize,
    pub size: usize,
    pub label: usize,
}

impl PreparedVideo {
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.frames[t * n..(t + 1) * n]
    }

    /// Concatenates the frames at `indices`.
    pub fn gather(&self, indices: &[usize], out: &mut Vec<f32>) {
        for &i in indices {
            out.extend_from_slice(self.frame(i));
        }
    }
}

pub fn prepare_video(video: &VideoSample, size: usize, max_depth: f64) -> Result<PreparedVideo> {
    let cropped = crop_foreground(video)?;
    let frames = (0..cropped.len)
        .into_par_iter()
        .flat_map_iter(|t| preprocess_frame(cropped.frame(t), cropped.height, cropped.width, size, max_depth))
        .collect();
    Ok(PreparedVideo {
        frames,
        len: video.len,
        size,
        label: video.label,
    })
}
