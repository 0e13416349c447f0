//! Temporal index selection: stateless windows and length resampling.

use rand::Rng;

/// Frames per stateless window.
pub const STATELESS_FRAMES: usize = 30;

/// Picks `frames` indices from a video of length `len`.
///
/// * `len < frames`: every frame, then the last one repeated.
/// * `frames <= len < stride_from`: a contiguous run.
/// * `len >= stride_from`: every second frame over a span of `2 * frames`.
///
/// `stride_from` defaults to `2 * frames`, the smallest length at which a
/// stride-2 run fits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSampler {
    pub frames: usize,
    pub stride_from: usize,
}

impl WindowSampler {
    pub fn new(frames: usize) -> Self {
        WindowSampler {
            frames,
            stride_from: 2 * frames,
        }
    }

    /// Largest valid start and the step for a video of length `len`.
    fn layout(&self, len: usize) -> Option<(usize, usize)> {
        let d = self.frames;
        if len < d {
            None
        } else if len < self.stride_from.max(2 * d - 1) {
            Some((len - d, 1))
        } else {
            Some((len - 2 * d + 1, 2))
        }
    }

    /// Indices starting at `start` (clamped to the valid range).
    pub fn at(&self, len: usize, start: usize) -> Vec<usize> {
        match self.layout(len) {
            None => (0..self.frames).map(|i| i.min(len - 1)).collect(),
            Some((max_start, step)) => {
                let j = start.min(max_start);
                (0..self.frames).map(|i| j + step * i).collect()
            }
        }
    }

    /// Training-time window with a uniform random start.
    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<usize> {
        let start = match self.layout(len) {
            Some((max_start, _)) => rng.gen_range(0..=max_start),
            None => 0,
        };
        self.at(len, start)
    }

    /// Evaluation window centered in the video.
    pub fn center(&self, len: usize) -> Vec<usize> {
        let start = self.layout(len).map_or(0, |(max_start, _)| max_start / 2);
        self.at(len, start)
    }
}

/// Stateless window of [`STATELESS_FRAMES`]-style length `d` with a random start.
pub fn select_window_stateless(len: usize, d: usize, rng: &mut impl Rng) -> Vec<usize> {
    WindowSampler::new(d).sample(len, rng)
}

/// Maps a video of length `len` onto `target` frame indices.
///
/// Longer videos are subsampled uniformly with both endpoints kept; shorter
/// ones are extended by repeating their final frame.
pub fn resample_to_length(len: usize, target: usize) -> Vec<usize> {
    if len < target {
        return (0..target).map(|i| i.min(len - 1)).collect();
    }
    if target == 1 {
        return vec![len - 1];
    }
    (0..target)
        .map(|i| ((i * (len - 1)) as f64 / (target - 1) as f64).round() as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn short_video_repeats_last_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = select_window_stateless(26, 30, &mut rng);
        let mut want: Vec<usize> = (0..26).collect();
        want.extend([25; 4]);
        assert_eq!(w, want);
    }

    #[test]
    fn exact_length_is_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(select_window_stateless(30, 30, &mut rng), (0..30).collect::<Vec<_>>());
        }
    }

    #[test]
    fn long_video_strides_by_two() {
        let w = WindowSampler::new(30).at(120, 5);
        assert_eq!(w, (5..=63).step_by(2).collect::<Vec<_>>());
        assert_eq!(w.last().unwrap() - w[0] + 2, 60);
    }

    #[test]
    fn starts_cover_their_range() {
        let s = WindowSampler::new(30);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let starts: std::collections::BTreeSet<usize> = (0..2000).map(|_| s.sample(45, &mut rng)[0]).collect();
        assert_eq!(starts, (0..=15).collect());
        let starts: std::collections::BTreeSet<usize> = (0..4000).map(|_| s.sample(80, &mut rng)[0]).collect();
        assert_eq!(starts, (0..=21).collect());
    }

    #[test]
    fn center_windows() {
        let s = WindowSampler::new(30);
        assert_eq!(s.center(40)[0], 5);
        assert_eq!(s.center(101)[0], 21);
        assert_eq!(s.center(10), s.at(10, 0));
    }

    #[test]
    fn resampling() {
        assert_eq!(resample_to_length(40, 40), (0..40).collect::<Vec<_>>());
        let idx = resample_to_length(46, 40);
        assert_eq!(idx.len(), 40);
        assert_eq!((idx[0], idx[39]), (0, 45));
        assert!(idx.windows(2).all(|p| p[0] <= p[1]));
        for (i, &v) in idx.iter().enumerate() {
            assert_eq!(v, (i as f64 * 45.0 / 39.0).round() as usize);
        }
        let pad = resample_to_length(26, 32);
        assert_eq!(&pad[..26], &(0..26).collect::<Vec<_>>()[..]);
        assert_eq!(&pad[26..], &[25; 6]);
    }

    proptest! {
        #[test]
        fn window_invariants(len in 1usize..400, d in 1usize..40, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = select_window_stateless(len, d, &mut rng);
            prop_assert_eq!(w.len(), d);
            prop_assert!(w.iter().all(|&i| i < len));
            prop_assert!(w.windows(2).all(|p| p[0] <= p[1]));
            let c = WindowSampler::new(d).center(len);
            prop_assert!(c.iter().all(|&i| i < len));
        }

        #[test]
        fn resample_invariants(len in 1usize..400, target in 1usize..300) {
            let idx = resample_to_length(len, target);
            prop_assert_eq!(idx.len(), target);
            prop_assert!(idx.iter().all(|&i| i < len));
            prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
            if len >= target && target > 1 {
                prop_assert_eq!(idx[0], 0);
                prop_assert_eq!(*idx.last().unwrap(), len - 1);
            }
        }
    }
}
