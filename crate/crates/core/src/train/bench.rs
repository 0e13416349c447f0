//! Per-video inference latency.

use std::time::Instant;

use super::loops::{predict_videos, EvalConfig};
use crate::data::PreparedVideo;
use crate::error::{Error, Result};
use crate::models::Network;
use crate::scalar::Real;

/// Iterations run before timing starts.
pub const BENCH_WARMUP: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    /// Seconds per video.
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    /// Mean video length divided by mean latency.
    pub fps: f64,
    pub samples: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times whole-video inference: one centered window for stateless networks,
/// the full window schedule for stateful ones.
pub fn bench_inference<T: Real>(
    net: &mut Network<T>,
    videos: &[PreparedVideo],
    repetitions: usize,
    warmup: usize,
    cfg: &EvalConfig,
) -> Result<BenchReport> {
    if videos.is_empty() || repetitions == 0 {
        return Err(Error::invalid("benchmark needs videos and at least one repetition"));
    }
    let cfg = EvalConfig {
        batch_size: 1,
        ..cfg.clone()
    };
    for i in 0..warmup {
        predict_videos(net, std::slice::from_ref(&videos[i % videos.len()]), &cfg)?;
    }
    let mut times = Vec::with_capacity(videos.len() * repetitions);
    for _ in 0..repetitions {
        for v in videos {
            let start = Instant::now();
            predict_videos(net, std::slice::from_ref(v), &cfg)?;
            times.push(start.elapsed().as_secs_f64());
        }
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let frames = videos.iter().map(|v| v.len as f64).sum::<f64>() / videos.len() as f64;
    Ok(BenchReport {
        mean,
        p50: percentile(&times, 0.5),
        p95: percentile(&times, 0.95),
        fps: frames / mean,
        samples: times.len(),
    })
}
