//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use cle_core::data::{BinSchedule, DatasetManifest, SplitRule, CLIP_LEN, DEFAULT_EDGES, MAX_DEPTH};
use cle_core::models::{ArchConfig, Architecture, NetworkSpec, PaddingRule};
use cle_core::train::{AdamConfig, ScheduleSpec, TrainConfig, WEIGHT_EXPONENT};
use cle_core::Precision;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every key with its default. Printed by `--help` and kept in sync with
/// [`RunConfig::default`] by a test.
pub const CONFIG_REFERENCE: &str = r#"CONFIG FILE (TOML; unknown keys are rejected)

  model = "stateless"            # stateless | stateful
  precision = "single"           # single | double
  seed = 0                       # omitted: $CLE_SEED, else 0
  out_dir = "runs/default"

  [data]
  manifest = "data/manifest.csv"
  split = "random"               # random | cross_subject | cross_view
  train_fraction = 0.8           # random split only
  train_subjects = [1, 2, 4, 5, 8, 9, 13, 14, 15, 16, 17, 18, 19, 25, 27, 28, 31, 34, 35, 38]
  train_cameras = [2, 3]
  validation_fraction = 0.1      # carved from the training side
  size = 64                      # frame side after crop and resize
  max_depth = 4500.0             # depth normalization divisor

  [network]                      # omitted keys follow the chosen model
  # frames = 30                  # stateless clip length (stateful: clip_len)
  # main_widths = [32, 32, 128, 256]      # stateful: [32, 64, 128, 256]
  # support_widths = [8, 16]
  # decision_width = 128
  # padding = "reference"        # reference | same ("same" once size or widths change)
  # dropout = 0.25               # stateful only
  peephole = false
  # leaky_alpha = 0.3

  [train]
  # epochs = 75                  # default: end of the schedule
  # batch_size = 12              # stateful: 6
  clip_len = 8
  bin_edges = [32, 40, 48, 56, 64, 72, 80, 88, 96, 104, 112, 128, 144, 160, 176, 208]
  weight_exponent = 3.0
  carry_state = true
  # schedule = { kind = "constant", lr = 1e-4 }   # default: the model's reference plan
  # other kinds: cyclical {min_lr, max_lr, half_cycle}, step {table, end},
  #   plateau {initial_lr, patience, factor}, piecewise {phases}

  [train.adam]
  beta1 = 0.9
  beta2 = 0.999
  epsilon = 1e-8
"#;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Random,
    CrossSubject,
    CrossView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Architecture,
    pub precision: Precision,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub network: NetworkSection,
    pub train: TrainSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub manifest: PathBuf,
    pub split: SplitKind,
    pub train_fraction: f64,
    pub train_subjects: Vec<u32>,
    pub train_cameras: Vec<u32>,
    pub validation_fraction: f64,
    pub size: usize,
    pub max_depth: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub frames: Option<usize>,
    pub main_widths: Option<[usize; 4]>,
    pub support_widths: Option<[usize; 2]>,
    pub decision_width: Option<usize>,
    pub padding: Option<PaddingRule>,
    pub dropout: Option<f64>,
    pub peephole: bool,
    pub leaky_alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub clip_len: usize,
    pub bin_edges: Vec<usize>,
    pub weight_exponent: f64,
    pub carry_state: bool,
    pub schedule: Option<ScheduleSpec>,
    pub adam: AdamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: Architecture::Stateless,
            precision: Precision::Single,
            seed: None,
            out_dir: "runs/default".into(),
            data: DataSection::default(),
            network: NetworkSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: "data/manifest.csv".into(),
            split: SplitKind::Random,
            train_fraction: 0.8,
            train_subjects: cle_core::data::CROSS_SUBJECT_TRAIN.to_vec(),
            train_cameras: cle_core::data::CROSS_VIEW_TRAIN.to_vec(),
            validation_fraction: 0.1,
            size: 64,
            max_depth: MAX_DEPTH,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: None,
            batch_size: None,
            clip_len: CLIP_LEN,
            bin_edges: DEFAULT_EDGES.to_vec(),
            weight_exponent: WEIGHT_EXPONENT,
            carry_state: true,
            schedule: None,
            adam: AdamConfig::default(),
        }
    }
}

/// Global seed fallback when a seed is not given explicitly.
pub fn env_seed() -> Result<u64, CliError> {
    match std::env::var("CLE_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("CLE_SEED=`{s}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::usage(format!("{}: {}", path.display(), e.message)))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills every optional key with its effective value so the echoed file
    /// fully describes the run.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        if self.seed.is_none() {
            self.seed = Some(env_seed()?);
        }
        let base = self.arch_config(2);
        let n = &mut self.network;
        n.frames.get_or_insert(base.frames);
        n.main_widths.get_or_insert(base.main_widths);
        n.support_widths.get_or_insert(base.support_widths);
        n.decision_width.get_or_insert(base.decision_width);
        n.padding.get_or_insert(base.padding);
        n.dropout.get_or_insert(base.dropout);
        n.leaky_alpha.get_or_insert(base.leaky_alpha);
        let defaults = self.model_defaults();
        let t = &mut self.train;
        t.batch_size.get_or_insert(defaults.batch_size);
        let end = t.schedule.get_or_insert(defaults.schedule).end();
        if t.epochs.is_none() {
            t.epochs = end;
        }
        Ok(self)
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed.map_or_else(env_seed, Ok)
    }

    fn model_defaults(&self) -> TrainConfig {
        match self.model {
            Architecture::Stateless => TrainConfig::stateless(),
            Architecture::Stateful => TrainConfig::stateful(),
        }
    }

    /// Architecture hyper-parameters for `num_classes` classes.
    pub fn arch_config(&self, num_classes: usize) -> ArchConfig {
        let base = match self.model {
            Architecture::Stateless => ArchConfig::stateless(num_classes),
            Architecture::Stateful => ArchConfig::stateful(num_classes),
        };
        let n = &self.network;
        let changed = self.data.size != base.size
            || n.main_widths.is_some_and(|w| w != base.main_widths)
            || n.support_widths.is_some_and(|w| w != base.support_widths)
            || n.decision_width.is_some_and(|w| w != base.decision_width);
        let mut cfg = if changed {
            base.clone().scaled(
                self.data.size,
                n.main_widths.unwrap_or(base.main_widths),
                n.support_widths.unwrap_or(base.support_widths),
                n.decision_width.unwrap_or(base.decision_width),
            )
        } else {
            base
        };
        if self.model == Architecture::Stateful {
            cfg.frames = self.train.clip_len;
        } else if let Some(f) = n.frames {
            cfg.frames = f;
        }
        if let Some(p) = n.padding {
            cfg.padding = p;
        }
        if let Some(d) = n.dropout {
            cfg.dropout = d;
        }
        if let Some(a) = n.leaky_alpha {
            cfg.leaky_alpha = a;
        }
        cfg.peephole = n.peephole;
        cfg
    }

    pub fn network_spec(&self, num_classes: usize) -> Result<NetworkSpec, CliError> {
        let cfg = self.arch_config(num_classes);
        Ok(match self.model {
            Architecture::Stateless => NetworkSpec::stateless(cfg)?,
            Architecture::Stateful => NetworkSpec::stateful(cfg)?,
        })
    }

    pub fn split_rule(&self) -> Result<SplitRule, CliError> {
        Ok(match self.data.split {
            SplitKind::Random => SplitRule::Random {
                fraction: self.data.train_fraction,
                seed: self.seed()?,
            },
            SplitKind::CrossSubject => SplitRule::CrossSubject {
                train_subjects: self.data.train_subjects.clone(),
            },
            SplitKind::CrossView => SplitRule::CrossView {
                train_cameras: self.data.train_cameras.clone(),
            },
        })
    }

    pub fn bins(&self) -> Result<BinSchedule, CliError> {
        Ok(BinSchedule::with_clip_len(
            self.train.bin_edges.clone(),
            self.train.clip_len,
        )?)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let d = self.model_defaults();
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size.unwrap_or(d.batch_size),
            clip_len: self.train.clip_len,
            bins: self.bins()?,
            schedule: self.train.schedule.clone().unwrap_or(d.schedule),
            adam: self.train.adam,
            seed: self.seed()?,
            weight_exponent: self.train.weight_exponent,
            carry_state: self.train.carry_state,
            out_dir: Some(self.out_dir.clone()),
            resume: false,
            progress: true,
        })
    }

    /// Manifest path, relative paths resolved against `base`.
    pub fn manifest(&self, base: &Path) -> Result<DatasetManifest, CliError> {
        let path = if self.data.manifest.is_absolute() {
            self.data.manifest.clone()
        } else {
            base.join(&self.data.manifest)
        };
        Ok(DatasetManifest::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The reference text with its commented-out optional keys is exactly the
    /// default configuration.
    #[test]
    fn reference_matches_defaults() {
        let body: String = CONFIG_REFERENCE.lines().skip(1).map(|l| format!("{l}\n")).collect();
        let mut parsed = RunConfig::parse(&body).unwrap();
        assert_eq!(parsed.seed, Some(0));
        parsed.seed = None;
        assert_eq!(parsed, RunConfig::default());
    }

    #[test]
    fn guide_example_parses() {
        let guide = include_str!("../../../book/src/cli.md");
        let body = guide.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
        let cfg = RunConfig::parse(body).unwrap().resolve().unwrap();
        assert_eq!(cfg.model, Architecture::Stateful);
        assert_eq!(cfg.train.epochs, Some(12));
        assert_eq!(cfg.arch_config(4).padding, cle_core::models::PaddingRule::Same);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "modle = \"stateful\"",
            "[train]\nbatch = 3",
            "[data]\nsize = 16\nsplt = \"random\"",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert_eq!(err.code, 2, "{text}");
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        for model in ["stateless", "stateful"] {
            let cfg = RunConfig::parse(&format!("model = \"{model}\"\nseed = 3\n[data]\nsize = 16\n"))
                .unwrap()
                .resolve()
                .unwrap();
            assert!(cfg.train.schedule.is_some() && cfg.train.batch_size.is_some());
            let again = RunConfig::parse(&cfg.to_toml()).unwrap();
            assert_eq!(again, cfg);
            assert_eq!(again.arch_config(4), cfg.arch_config(4));
        }
    }

    #[test]
    fn model_defaults() {
        let stateless = RunConfig::default().resolve().unwrap();
        assert_eq!(stateless.train.batch_size, Some(12));
        assert_eq!(stateless.train.epochs, Some(75));
        let stateful = RunConfig::parse("model = \"stateful\"").unwrap().resolve().unwrap();
        assert_eq!(stateful.train.batch_size, Some(6));
        assert_eq!(stateful.arch_config(60), ArchConfig::stateful(60));
        assert_eq!(stateless.arch_config(60), ArchConfig::stateless(60));
    }

    #[test]
    fn scaled_networks_switch_padding() {
        let cfg = RunConfig::parse("[data]\nsize = 16\n[network]\nmain_widths = [8, 8, 16, 32]\n").unwrap();
        let a = cfg.arch_config(4);
        assert_eq!(
            (a.size, a.main_widths, a.padding),
            (16, [8, 8, 16, 32], PaddingRule::Same)
        );
        cfg.network_spec(4).unwrap().trace().unwrap();
    }

    #[test]
    fn schedule_tables_parse() {
        let cfg =
            RunConfig::parse("[train]\nschedule = { kind = \"step\", table = [[0, 9e-5], [4, 3e-5]], end = 10 }\n")
                .unwrap();
        assert_eq!(
            cfg.train.schedule,
            Some(ScheduleSpec::Step {
                table: vec![(0, 9e-5), (4, 3e-5)],
                end: 10
            })
        );
    }
}
