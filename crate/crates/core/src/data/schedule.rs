//! Batch assembly for both training modes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::bins::BinSchedule;
use super::preprocess::PreparedVideo;
use super::window::{resample_to_length, WindowSampler};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One network input: `B` clips of `d` frames plus stream bookkeeping.
#[derive(Clone, Debug)]
pub struct ClipBatch {
    /// `[B,d,S,S,1]`
    pub clips: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Source video ids, one per row.
    pub videos: Vec<usize>,
    /// Rows whose recurrent state must be zeroed before this window.
    pub reset_before: Vec<bool>,
    /// Whether this window is trained on (false for warm-up windows).
    pub update_weights: bool,
    /// 1-based window position `t`.
    pub window: usize,
    /// Windows per video in this stream, `T`.
    pub windows_total: usize,
}

impl ClipBatch {
    pub fn batch(&self) -> usize {
        self.labels.len()
    }

    fn assemble(
        source: &[PreparedVideo],
        rows: &[(usize, Vec<usize>)],
        window: usize,
        windows_total: usize,
        update_weights: bool,
    ) -> Result<ClipBatch> {
        let (first, _) = rows.first().ok_or(Error::EmptyBatch("clip batch"))?;
        let size = source[*first].size;
        let d = rows[0].1.len();
        let mut data = Vec::with_capacity(rows.len() * d * size * size);
        for (id, idx) in rows {
            let v = &source[*id];
            if v.size != size {
                return Err(Error::shape("clip batch", "frame size", size, v.size));
            }
            v.gather(idx, &mut data);
        }
        Ok(ClipBatch {
            clips: Tensor::new(&[rows.len(), d, size, size, 1], data)?,
            labels: rows.iter().map(|(id, _)| source[*id].label).collect(),
            videos: rows.iter().map(|(id, _)| *id).collect(),
            reset_before: vec![window == 1; rows.len()],
            update_weights,
            window,
            windows_total,
        })
    }
}

/// Where a stateless window starts.
pub enum Sampling<'a, R: Rng> {
    /// Uniformly random start (training).
    Random(&'a mut R),
    /// Deterministic centered start (evaluation).
    Center,
}

/// One stateless batch over the videos `ids` of `source`.
pub fn stateless_batch<R: Rng>(
    source: &[PreparedVideo],
    ids: &[usize],
    sampler: &WindowSampler,
    mut sampling: Sampling<'_, R>,
) -> Result<ClipBatch> {
    let rows: Vec<(usize, Vec<usize>)> = ids
        .iter()
        .map(|&id| {
            let len = source[id].len;
            let idx = match &mut sampling {
                Sampling::Random(rng) => sampler.sample(len, *rng),
                Sampling::Center => sampler.center(len),
            };
            (id, idx)
        })
        .collect();
    ClipBatch::assemble(source, &rows, 1, 1, true)
}

/// Same-length videos processed together across `reduced_len / clip_len`
/// consecutive windows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchGroup {
    pub videos: Vec<usize>,
    /// Rows that duplicate another video to fill the batch.
    pub padded: Vec<bool>,
    pub reduced_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StatefulSchedule {
    pub clip_len: usize,
    pub groups: Vec<BatchGroup>,
}

/// Number of forward-only windows before training starts: `floor(T/2)`.
pub fn warmup_windows(total: usize) -> usize {
    total / 2
}

/// Groups `(id, length)` pairs by reduced length and packs each group into
/// batches of `batch` videos.
///
/// With `pad_remainder`, a short final batch is filled with videos drawn
/// again from the same bin; otherwise it is emitted narrower.
pub fn make_stateful_schedule(
    videos: &[(usize, usize)],
    batch: usize,
    clip_len: usize,
    bins: &BinSchedule,
    pad_remainder: bool,
    rng: &mut impl Rng,
) -> Result<StatefulSchedule> {
    if videos.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if batch == 0 || clip_len == 0 {
        return Err(Error::invalid("batch size and clip length must be positive"));
    }
    if let Some(e) = bins.edges().iter().find(|&&e| e % clip_len != 0) {
        return Err(Error::invalid(format!(
            "bin edge {e} is not a multiple of clip length {clip_len}"
        )));
    }
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(id, len) in videos {
        if len == 0 {
            return Err(Error::invalid(format!("video {id} has no frames")));
        }
        by_len.entry(bins.assign(len)).or_default().push(id);
    }
    let mut groups = Vec::new();
    for (reduced_len, mut ids) in by_len {
        ids.shuffle(rng);
        for chunk in ids.chunks(batch) {
            let mut group = BatchGroup {
                videos: chunk.to_vec(),
                padded: vec![false; chunk.len()],
                reduced_len,
            };
            if pad_remainder {
                while group.videos.len() < batch {
                    group.videos.push(*ids.choose(rng).expect("bin is non-empty"));
                    group.padded.push(true);
                }
            }
            groups.push(group);
        }
    }
    groups.shuffle(rng);
    Ok(StatefulSchedule { clip_len, groups })
}

impl StatefulSchedule {
    pub fn windows_total(&self, group: &BatchGroup) -> usize {
        group.reduced_len / self.clip_len
    }

    /// Total number of windows in the stream.
    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| self.windows_total(g)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// The `T` windows of one group, in order.
    pub fn group_windows(&self, group: &BatchGroup, source: &[PreparedVideo]) -> Result<Vec<ClipBatch>> {
        let total = self.windows_total(group);
        let warmup = warmup_windows(total);
        let maps: Vec<Vec<usize>> = group
            .videos
            .iter()
            .map(|&id| resample_to_length(source[id].len, group.reduced_len))
            .collect();
        (1..=total)
            .map(|t| {
                let rows: Vec<(usize, Vec<usize>)> = group
                    .videos
                    .iter()
                    .zip(&maps)
                    .map(|(&id, map)| (id, map[(t - 1) * self.clip_len..t * self.clip_len].to_vec()))
                    .collect();
                ClipBatch::assemble(source, &rows, t, total, t > warmup)
            })
            .collect()
    }

    /// Every window of every group, in consumption order.
    pub fn stream<'a>(&'a self, source: &'a [PreparedVideo]) -> impl Iterator<Item = Result<ClipBatch>> + 'a {
        self.groups
            .iter()
            .flat_map(move |g| match self.group_windows(g, source) {
                Ok(ws) => ws.into_iter().map(Ok).collect::<Vec<_>>(),
                Err(e) => vec![Err(e)],
            })
    }
}
