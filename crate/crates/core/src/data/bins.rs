//! Length binning for same-length stateful batches.

use crate::error::{Error, Result};

/// Frames per stateful window.
pub const CLIP_LEN: usize = 8;

pub const DEFAULT_EDGES: [usize; 16] = [32, 40, 48, 56, 64, 72, 80, 88, 96, 104, 112, 128, 144, 160, 176, 208];

/// Ascending reduced lengths, each a multiple of the clip length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinSchedule {
    edges: Vec<usize>,
}

impl Default for BinSchedule {
    fn default() -> Self {
        BinSchedule {
            edges: DEFAULT_EDGES.to_vec(),
        }
    }
}

impl BinSchedule {
    pub fn new(edges: Vec<usize>) -> Result<Self> {
        Self::with_clip_len(edges, CLIP_LEN)
    }

    pub fn with_clip_len(edges: Vec<usize>, clip_len: usize) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::EmptySchedule);
        }
        if let Some(e) = edges.iter().find(|&&e| e == 0 || e % clip_len != 0) {
            return Err(Error::invalid(format!(
                "bin edge {e} is not a positive multiple of {clip_len}"
            )));
        }
        if edges.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::invalid("bin edges must be strictly increasing"));
        }
        Ok(BinSchedule { edges })
    }

    pub fn edges(&self) -> &[usize] {
        &self.edges
    }

    /// Longest reduced length.
    pub fn cap(&self) -> usize {
        *self.edges.last().unwrap()
    }

    /// Largest edge not above `len`; lengths below the first edge map to it.
    pub fn assign(&self, len: usize) -> usize {
        match self.edges.partition_point(|&e| e <= len) {
            0 => self.edges[0],
            i => self.edges[i - 1],
        }
    }
}

/// Reduced length of a `len`-frame video under `schedule`.
pub fn assign_bin(len: usize, schedule: &BinSchedule) -> usize {
    schedule.assign(len)
}

/// Video counts per class (rows) and bin (columns).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LengthHistogram {
    pub edges: Vec<usize>,
    pub counts: Vec<Vec<usize>>,
}

impl LengthHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// CSV with header `class,<edge>,<edge>,...`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["class".to_string()];
        header.extend(self.edges.iter().map(|e| e.to_string()));
        w.write_record(&header)?;
        for (class, row) in self.counts.iter().enumerate() {
            let mut rec = vec![class.to_string()];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Counts `(label, length)` pairs per class and assigned bin.
pub fn length_histogram(
    videos: impl IntoIterator<Item = (usize, usize)>,
    num_classes: usize,
    schedule: &BinSchedule,
) -> LengthHistogram {
    let edges = schedule.edges().to_vec();
    let mut counts = vec![vec![0; edges.len()]; num_classes];
    for (label, len) in videos {
        if label >= counts.len() {
            counts.resize(label + 1, vec![0; edges.len()]);
        }
        let bin = edges.partition_point(|&e| e < schedule.assign(len));
        counts[label][bin] += 1;
    }
    LengthHistogram { edges, counts }
}
