//! Video ingestion, preprocessing, window selection, length binning and
//! synthetic data.

mod bins;
mod manifest;
mod preprocess;
mod schedule;
mod synth;
mod video;
mod window;

pub use bins::{assign_bin, length_histogram, BinSchedule, LengthHistogram, CLIP_LEN, DEFAULT_EDGES};
pub use manifest::{DatasetManifest, ManifestRecord, Split, SplitRule, CROSS_SUBJECT_TRAIN, CROSS_VIEW_TRAIN};
pub use preprocess::{
    crop_foreground, foreground_box, prepare_video, preprocess_frame, resize_bilinear, CropBox, PreparedVideo,
    CROP_MARGIN, MAX_DEPTH,
};
pub use schedule::{
    make_stateful_schedule, stateless_batch, warmup_windows, BatchGroup, ClipBatch, Sampling, StatefulSchedule,
};
pub use synth::{generate_synthetic_dataset, SynthSpec};
pub use video::{
    decode_video, encode_video, load_video, store_video, write_atomic, VideoSample, DVID_HEADER_LEN, DVID_VERSION,
};
pub use window::{resample_to_length, select_window_stateless, WindowSampler, STATELESS_FRAMES};

/// Loads and prepares the listed manifest records in parallel.
pub fn prepare_records(
    manifest: &DatasetManifest,
    ids: &[usize],
    size: usize,
    max_depth: f64,
) -> crate::Result<Vec<PreparedVideo>> {
    use rayon::prelude::*;
    ids.par_iter()
        .map(|&i| prepare_video(&manifest.load(i)?, size, max_depth))
        .collect()
}
