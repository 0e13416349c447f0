//! Dataset manifests and train/test splits.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::video::{load_video, write_atomic, VideoSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: usize,
    pub subject: u32,
    pub camera: u32,
    pub frames: usize,
}

/// Video records plus the directory relative paths resolve against.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

/// Training subjects of the usual cross-subject protocol.
pub const CROSS_SUBJECT_TRAIN: [u32; 20] = [1, 2, 4, 5, 8, 9, 13, 14, 15, 16, 17, 18, 19, 25, 27, 28, 31, 34, 35, 38];
/// Training cameras of the usual cross-view protocol.
pub const CROSS_VIEW_TRAIN: [u32; 2] = [2, 3];

#[derive(Clone, Debug, PartialEq)]
pub enum SplitRule {
    /// Videos of the listed subjects train; the rest test.
    CrossSubject { train_subjects: Vec<u32> },
    /// Videos from the listed cameras train; the rest test.
    CrossView { train_cameras: Vec<u32> },
    /// A seeded random `fraction` of videos trains.
    Random { fraction: f64, seed: u64 },
}

impl SplitRule {
    pub fn cross_subject() -> Self {
        SplitRule::CrossSubject {
            train_subjects: CROSS_SUBJECT_TRAIN.to_vec(),
        }
    }

    pub fn cross_view() -> Self {
        SplitRule::CrossView {
            train_cameras: CROSS_VIEW_TRAIN.to_vec(),
        }
    }
}

/// Indices into a manifest's records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(Error::at_path(path))?;
        let mut records = Vec::new();
        for rec in csv::Reader::from_reader(file).deserialize() {
            records.push(rec?);
        }
        Ok(DatasetManifest {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.records.is_empty() {
            w.write_record(["path", "label", "subject", "camera", "frames"])?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_csv()?)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.records.iter().map(|r| r.label + 1).max().unwrap_or(0)
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Loads the video of record `i`, attaching its manifest metadata.
    pub fn load(&self, i: usize) -> Result<VideoSample> {
        let r = &self.records[i];
        let v = load_video(self.resolve(r))?;
        Ok(v.with_meta(r.label, r.subject, r.camera))
    }

    /// Partitions records into train and test, then carves a seeded
    /// `validation_fraction` off the training side.
    pub fn split(&self, rule: &SplitRule, validation_fraction: f64, seed: u64) -> Result<Split> {
        if self.records.is_empty() {
            return Err(Error::EmptyManifest);
        }
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::invalid(format!(
                "validation fraction {validation_fraction} not in [0, 1)"
            )));
        }
        let all: Vec<usize> = (0..self.records.len()).collect();
        let (train, test): (Vec<usize>, Vec<usize>) = match rule {
            SplitRule::CrossSubject { train_subjects } => {
                let set: BTreeSet<u32> = train_subjects.iter().copied().collect();
                all.into_iter().partition(|&i| set.contains(&self.records[i].subject))
            }
            SplitRule::CrossView { train_cameras } => {
                let set: BTreeSet<u32> = train_cameras.iter().copied().collect();
                all.into_iter().partition(|&i| set.contains(&self.records[i].camera))
            }
            SplitRule::Random { fraction, seed } => {
                if !(0.0..=1.0).contains(fraction) {
                    return Err(Error::invalid(format!("train fraction {fraction} not in [0, 1]")));
                }
                let mut shuffled = all;
                shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
                let n = (fraction * shuffled.len() as f64).round() as usize;
                let test = shuffled.split_off(n);
                let (mut train, mut test) = (shuffled, test);
                train.sort_unstable();
                test.sort_unstable();
                (train, test)
            }
        };
        let mut shuffled = train;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (validation_fraction * shuffled.len() as f64).round() as usize;
        let mut validation = shuffled.split_off(shuffled.len() - n_val);
        let mut train = shuffled;
        train.sort_unstable();
        validation.sort_unstable();
        Ok(Split {
            train,
            validation,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            root: PathBuf::new(),
            records: (0..n)
                .map(|i| ManifestRecord {
                    path: format!("videos/{i:05}.dvid").into(),
                    label: i % 3,
                    subject: (i % 40) as u32 + 1,
                    camera: (i % 3) as u32 + 1,
                    frames: 40 + i,
                })
                .collect(),
        }
    }

    fn check_partition(s: &Split, n: usize) {
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let m = manifest(5);
        m.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("path,label,subject,camera,frames\n"));
        let back = DatasetManifest::read(&path).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.root, dir.path());
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let m = manifest(120);
        for rule in [
            SplitRule::cross_subject(),
            SplitRule::cross_view(),
            SplitRule::Random { fraction: 0.7, seed: 3 },
        ] {
            let s = m.split(&rule, 0.1, 0).unwrap();
            check_partition(&s, 120);
        }
        let cv = m.split(&SplitRule::cross_view(), 0.0, 0).unwrap();
        assert!(cv.test.iter().all(|&i| m.records[i].camera == 1));
        assert!(cv.validation.is_empty());
    }

    #[test]
    fn validation_fraction() {
        let m = manifest(100);
        let s = m.split(&SplitRule::Random { fraction: 0.8, seed: 1 }, 0.1, 5).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (72, 8, 20));
        assert_eq!(
            s,
            m.split(&SplitRule::Random { fraction: 0.8, seed: 1 }, 0.1, 5).unwrap()
        );
    }

    #[test]
    fn empty_manifest() {
        assert!(matches!(
            DatasetManifest::default().split(&SplitRule::cross_view(), 0.1, 0),
            Err(Error::EmptyManifest)
        ));
    }
}
