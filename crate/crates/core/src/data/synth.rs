//! Synthetic depth videos: a Gaussian blob drifting over an empty scene.
//!
//! Class `k` of `K` moves the blob along the direction `2πk/K`. The scene
//! wraps around at its borders so the blob never leaves the frame. With
//! `late_cue`, the first half of every video is a class-independent random
//! walk and the class drift only starts halfway.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, ManifestRecord};
use super::video::{store_video, VideoSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub videos_per_class: usize,
    /// Inclusive frame-count range.
    pub length_range: (usize, usize),
    pub late_cue: bool,
    pub seed: u64,
    /// Square frame side in pixels.
    pub size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 4,
            videos_per_class: 50,
            length_range: (40, 80),
            late_cue: false,
            seed: 0,
            size: 32,
        }
    }
}

/// Per-frame random-walk step, as a fraction of the frame side.
const WALK: f64 = 0.02;
/// Class drift per frame, as a fraction of the frame side. With late cue it
/// only applies from the middle frame on.
const DRIFT: f64 = 0.02;

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("synthetic data needs at least 2 classes"));
        }
        let (lo, hi) = self.length_range;
        if lo == 0 || lo > hi {
            return Err(Error::invalid(format!("bad length range {lo}..={hi}")));
        }
        if self.size < 4 || self.size > u16::MAX as usize {
            return Err(Error::invalid(format!("bad frame size {}", self.size)));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.num_classes * self.videos_per_class
    }

    /// Label of the `index`-th video.
    pub fn label(&self, index: usize) -> usize {
        index % self.num_classes
    }

    /// Renders video `index` with the given class. Only the class drift
    /// depends on `label`; everything else comes from the video's own
    /// random stream.
    pub fn render(&self, index: usize, label: usize) -> Result<VideoSample> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let s = self.size as f64;
        let len = rng.gen_range(self.length_range.0..=self.length_range.1);
        let amplitude = rng.gen_range(2500.0..3500.0);
        let sigma = rng.gen_range(0.08..0.11) * s;
        let (mut x, mut y) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let angle = 2.0 * PI * label as f64 / self.num_classes as f64;
        let (dx, dy) = (angle.cos(), -angle.sin());
        let half = len / 2;

        let mut path = Vec::with_capacity(len);
        let mut drift_prev = 0.0;
        for t in 0..len {
            x += rng.gen_range(-1.0..1.0) * WALK * s;
            y += rng.gen_range(-1.0..1.0) * WALK * s;
            let drift = if !self.late_cue {
                DRIFT * s * t as f64
            } else if t < half {
                0.0
            } else {
                DRIFT * s * (t - half + 1) as f64
            };
            debug_assert!(drift >= drift_prev);
            drift_prev = drift;
            path.push((x + dx * drift, y + dy * drift));
        }

        let n = self.size;
        let mut frames = Vec::with_capacity(len * n * n);
        let cutoff = 0.05 * amplitude;
        for &(px, py) in &path {
            let (px, py) = (px.rem_euclid(s), py.rem_euclid(s));
            for r in 0..n {
                let ddy = wrap(r as f64 + 0.5 - py, s);
                for c in 0..n {
                    let ddx = wrap(c as f64 + 0.5 - px, s);
                    let v = amplitude * (-(ddx * ddx + ddy * ddy) / (2.0 * sigma * sigma)).exp();
                    frames.push(if v < cutoff { 0 } else { v.round().min(4500.0) as u16 });
                }
            }
        }
        Ok(VideoSample::new(frames, len, n, n)?.with_meta(label, subject(index), camera(index)))
    }

    /// Video `index` with its own label.
    pub fn video(&self, index: usize) -> Result<VideoSample> {
        self.render(index, self.label(index))
    }
}

fn wrap(d: f64, s: f64) -> f64 {
    let d = d.rem_euclid(s);
    if d > s / 2.0 {
        d - s
    } else {
        d
    }
}

fn subject(index: usize) -> u32 {
    (index % 40) as u32 + 1
}

fn camera(index: usize) -> u32 {
    (index % 3) as u32 + 1
}

/// Writes every video under `out_dir/videos/` plus `out_dir/manifest.csv`.
pub fn generate_synthetic_dataset(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    use rayon::prelude::*;

    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let videos_dir = out_dir.join("videos");
    std::fs::create_dir_all(&videos_dir).map_err(Error::at_path(&videos_dir))?;
    let records = (0..spec.total())
        .into_par_iter()
        .map(|i| {
            let v = spec.video(i)?;
            let rel = Path::new("videos").join(format!("{i:05}.dvid"));
            store_video(&v, out_dir.join(&rel))?;
            Ok(ManifestRecord {
                path: rel,
                label: v.label,
                subject: v.subject,
                camera: v.camera,
                frames: v.len,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.write(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(late_cue: bool) -> SynthSpec {
        SynthSpec {
            num_classes: 4,
            videos_per_class: 3,
            length_range: (20, 40),
            late_cue,
            seed: 7,
            size: 24,
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let s = spec(false);
        for i in 0..s.total() {
            let v = s.video(i).unwrap();
            assert_eq!(v, s.video(i).unwrap());
            assert!((20..=40).contains(&v.len));
            assert!(v.frames.iter().all(|&d| d <= 4500));
            assert!(v.frames.iter().any(|&d| d > 0));
            assert_eq!(v.label, i % 4);
        }
    }

    #[test]
    fn late_cue_prefix_is_class_independent() {
        let s = spec(true);
        for i in 0..6 {
            let a = s.render(i, 0).unwrap();
            let b = s.render(i, 2).unwrap();
            let n = a.height * a.width;
            let half = a.len / 2;
            assert_eq!(&a.frames[..half * n], &b.frames[..half * n]);
            assert_ne!(&a.frames[(a.len - 1) * n..], &b.frames[(b.len - 1) * n..]);
        }
    }

    #[test]
    fn dataset_on_disk_is_reproducible() {
        let s = spec(false);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_synthetic_dataset(&s, a.path()).unwrap();
        let mb = generate_synthetic_dataset(&s, b.path()).unwrap();
        assert_eq!(ma.records, mb.records);
        assert_eq!(ma.num_classes(), 4);
        for r in &ma.records {
            let x = std::fs::read(a.path().join(&r.path)).unwrap();
            let y = std::fs::read(b.path().join(&r.path)).unwrap();
            assert_eq!(x, y);
        }
        let back = DatasetManifest::read(a.path().join("manifest.csv")).unwrap();
        assert_eq!(back.load(3).unwrap(), s.video(3).unwrap());
    }

    #[test]
    fn needs_two_classes() {
        let s = SynthSpec {
            num_classes: 1,
            ..spec(false)
        };
        assert!(s.video(0).is_err());
    }
}
