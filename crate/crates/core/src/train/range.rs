//! Learning-rate range test.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::schedule::{Position, ScheduleSpec};
use crate::data::{
    make_stateful_schedule, stateless_batch, BinSchedule, ClipBatch, PreparedVideo, Sampling, WindowSampler,
};
use crate::error::{Error, Result};
use crate::models::{Architecture, Network, Pass};
use crate::ops::softmax_cross_entropy;
use crate::scalar::Real;

/// Smoothing coefficient of the loss moving average.
pub const RANGE_SMOOTHING: f64 = 0.98;
/// Stop once the smoothed loss exceeds this multiple of its best value.
pub const RANGE_STOP_FACTOR: f64 = 4.0;
/// Divergence before this many iterations is reported as an error.
pub const RANGE_MIN_ITERS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeRecord {
    pub iter: usize,
    pub lr: f64,
    pub smoothed_loss: f64,
    pub raw_loss: f64,
}

/// Anything that can take one training step at a given rate.
pub trait RangeTarget {
    /// Trains one step and returns its loss.
    fn step(&mut self, lr: f64) -> Result<f64>;
}

/// Sweeps the rate exponentially from `lr_start` to `lr_end` over `iters`
/// steps, stopping early once the smoothed loss blows up.
pub fn lr_range_test(
    target: &mut impl RangeTarget,
    lr_start: f64,
    lr_end: f64,
    iters: usize,
) -> Result<Vec<RangeRecord>> {
    if iters < RANGE_MIN_ITERS {
        return Err(Error::invalid(format!(
            "range test needs at least {RANGE_MIN_ITERS} iterations"
        )));
    }
    let sched = ScheduleSpec::RangeTest {
        lr_start,
        lr_end,
        total_iters: iters,
    };
    sched.validate()?;
    let mut out = Vec::with_capacity(iters);
    let mut avg = 0.0;
    let mut best = f64::INFINITY;
    for i in 0..iters {
        let lr = sched.lr_at(Position {
            epoch: 0,
            iter: i,
            iters_per_epoch: iters,
        })?;
        let raw = match target.step(lr) {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => f64::NAN,
            Err(e) => return Err(e),
        };
        avg = RANGE_SMOOTHING * avg + (1.0 - RANGE_SMOOTHING) * raw;
        let smoothed = avg / (1.0 - RANGE_SMOOTHING.powi(i as i32 + 1));
        let diverged = !smoothed.is_finite() || (i > 0 && smoothed > RANGE_STOP_FACTOR * best);
        if diverged {
            if i < RANGE_MIN_ITERS {
                return Err(Error::EarlyDivergence { iters: i + 1 });
            }
            break;
        }
        best = best.min(smoothed);
        out.push(RangeRecord {
            iter: i,
            lr,
            smoothed_loss: smoothed,
            raw_loss: raw,
        });
    }
    Ok(out)
}

/// Range-test adapter that trains a network on its usual batches.
pub struct NetworkRangeTarget<'a, T> {
    net: &'a mut Network<T>,
    adam: AdamState<T>,
    videos: &'a [PreparedVideo],
    batch_size: usize,
    clip_len: usize,
    bins: BinSchedule,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pending: std::collections::VecDeque<ClipBatch>,
}

impl<'a, T: Real> NetworkRangeTarget<'a, T> {
    pub fn new(
        net: &'a mut Network<T>,
        videos: &'a [PreparedVideo],
        batch_size: usize,
        bins: BinSchedule,
        seed: u64,
    ) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::EmptySplit("train".into()));
        }
        Ok(NetworkRangeTarget {
            net,
            adam: AdamState::new(AdamConfig::default()),
            videos,
            batch_size: batch_size.max(2),
            clip_len: crate::data::CLIP_LEN,
            bins,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            pending: Default::default(),
        })
    }

    fn next_stateless(&mut self) -> Result<ClipBatch> {
        if self.order.len() < self.batch_size {
            let mut ids: Vec<usize> = (0..self.videos.len()).collect();
            ids.shuffle(&mut self.rng);
            self.order.extend(ids);
        }
        let take = self.batch_size.min(self.order.len());
        let ids: Vec<usize> = self.order.drain(..take).collect();
        let sampler = WindowSampler::new(self.net.spec().config.frames);
        stateless_batch(self.videos, &ids, &sampler, Sampling::Random(&mut self.rng))
    }

    fn refill_stateful(&mut self) -> Result<()> {
        let lengths: Vec<(usize, usize)> = self.videos.iter().enumerate().map(|(i, v)| (i, v.len)).collect();
        let sched = make_stateful_schedule(
            &lengths,
            self.batch_size,
            self.clip_len,
            &self.bins,
            true,
            &mut self.rng,
        )?;
        for g in &sched.groups {
            self.pending.extend(sched.group_windows(g, self.videos)?);
        }
        Ok(())
    }
}

impl<T: Real> RangeTarget for NetworkRangeTarget<'_, T> {
    fn step(&mut self, lr: f64) -> Result<f64> {
        let batch = match self.net.architecture() {
            Architecture::Stateless => self.next_stateless()?,
            Architecture::Stateful => loop {
                if self.pending.is_empty() {
                    self.refill_stateful()?;
                }
                let w = self.pending.pop_front().expect("refilled");
                if w.window == 1 {
                    self.net.reset_states();
                }
                if w.update_weights {
                    break w;
                }
                let pass = Pass {
                    record: false,
                    ..Pass::train(self.rng.gen())
                };
                self.net.forward_logits(&w.clips.cast::<T>(), pass)?;
            },
        };
        self.net.zero_grad();
        let logits = self
            .net
            .forward_logits(&batch.clips.cast::<T>(), Pass::train(self.rng.gen()))?;
        let (loss, grad) = softmax_cross_entropy(&logits, &batch.labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { layer: "loss".into() });
        }
        self.net.backward(&grad)?;
        self.adam.step_network(self.net, lr)?;
        Ok(loss.as_f64())
    }
}

pub fn range_csv(records: &[RangeRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record(["iter", "lr", "smoothed_loss", "raw_loss"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}
