//! Training loops, evaluation and checkpoint/resume plumbing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::metrics::{aggregate_predictions, argmax, MetricsReport, WEIGHT_EXPONENT};
use super::schedule::{Position, ScheduleSpec};
use crate::data::{
    make_stateful_schedule, stateless_batch, write_atomic, BinSchedule, ClipBatch, PreparedVideo, Sampling,
    WindowSampler, CLIP_LEN,
};
use crate::error::{Error, Result};
use crate::models::{load_into, Architecture, Checkpoint, Network, Pass};
use crate::ops::{activation, softmax_cross_entropy, Activation};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Epochs to run; defaults to the schedule's end.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    /// Frames per stateful window.
    pub clip_len: usize,
    pub bins: BinSchedule,
    pub schedule: ScheduleSpec,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weight_exponent: f64,
    /// Carry recurrent state across the windows of a video (stateful only).
    /// Turning it off resets state before every window.
    pub carry_state: bool,
    /// Where logs and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/last.clck` if present.
    pub resume: bool,
    /// Print one line per epoch to stderr.
    pub progress: bool,
}

impl TrainConfig {
    pub fn stateless() -> Self {
        TrainConfig {
            epochs: None,
            batch_size: 12,
            clip_len: CLIP_LEN,
            bins: BinSchedule::default(),
            schedule: ScheduleSpec::reference_stateless(),
            adam: AdamConfig::default(),
            seed: 0,
            weight_exponent: WEIGHT_EXPONENT,
            carry_state: true,
            out_dir: None,
            resume: false,
            progress: false,
        }
    }

    pub fn stateful() -> Self {
        TrainConfig {
            batch_size: 6,
            schedule: ScheduleSpec::reference_stateful(),
            ..Self::stateless()
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            batch_size: self.batch_size,
            clip_len: self.clip_len,
            bins: self.bins.clone(),
            weight_exponent: self.weight_exponent,
            carry_state: self.carry_state,
        }
    }

    fn total_epochs(&self) -> Result<usize> {
        self.epochs
            .or(self.schedule.end())
            .ok_or_else(|| Error::invalid("epoch count required for an unbounded schedule"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub clip_len: usize,
    pub bins: BinSchedule,
    pub weight_exponent: f64,
    pub carry_state: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        TrainConfig::stateless().eval_config()
    }
}

/// One row of the per-epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub logs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_acc: f64,
    /// Optimizer steps taken over the whole run, including resumed epochs.
    pub steps: u64,
}

/// Rejects stateful windows that arrive out of order.
#[derive(Clone, Debug, Default)]
pub struct WindowCursor {
    next: Option<(usize, usize)>,
}

impl WindowCursor {
    pub fn accept(&mut self, w: &ClipBatch) -> Result<()> {
        let expected = match self.next {
            Some((t, total)) if t <= total => t,
            _ => 1,
        };
        if w.window != expected || w.window > w.windows_total {
            return Err(Error::OutOfOrderWindow {
                expected,
                got: w.window,
            });
        }
        if w.reset_before.iter().any(|&r| r != (w.window == 1)) {
            return Err(Error::invalid("reset flags must be set exactly on the first window"));
        }
        self.next = Some((w.window + 1, w.windows_total));
        Ok(())
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let p = activation(logits, Activation::Softmax { axis: 1 })?;
    let k = p.shape()[1];
    Ok(p.data()
        .chunks(k)
        .map(|r| r.iter().map(|v| v.as_f64()).collect())
        .collect())
}

fn apply_resets<T: Real>(net: &mut Network<T>, w: &ClipBatch, carry: bool) -> Result<()> {
    if !carry || w.reset_before.iter().all(|&r| r) {
        net.reset_states();
        Ok(())
    } else {
        net.reset_rows(&w.reset_before)
    }
}

/// One optimizer step on a batch; returns `(summed loss, per-row probabilities)`.
fn train_step<T: Real>(
    net: &mut Network<T>,
    adam: &mut AdamState<T>,
    clips: &Tensor<f32>,
    labels: &[usize],
    lr: f64,
    seed: u64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let x = clips.cast::<T>();
    net.zero_grad();
    let logits = net.forward_logits(&x, Pass::train(seed))?;
    let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { layer: "loss".into() });
    }
    net.backward(&grad)?;
    adam.step_network(net, lr)?;
    Ok((loss.as_f64() * labels.len() as f64, softmax_rows(&logits)?))
}

struct EpochStats {
    loss: f64,
    acc: f64,
    lr: f64,
}

fn stateless_epoch<T: Real>(
    net: &mut Network<T>,
    adam: &mut AdamState<T>,
    train: &[PreparedVideo],
    cfg: &TrainConfig,
    epoch: usize,
    history: &[f64],
) -> Result<EpochStats> {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let sampler = WindowSampler::new(net.spec().config.frames);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    // A single-row batch gives degenerate batch statistics.
    let batches: Vec<&[usize]> = order
        .chunks(cfg.batch_size)
        .filter(|c| c.len() > 1 || train.len() == 1)
        .collect();
    let iters = batches.len();
    let (mut loss, mut correct, mut seen) = (0.0, 0, 0);
    let mut first_lr = None;
    for (i, ids) in batches.into_iter().enumerate() {
        let lr = cfg.schedule.lr_with_history(
            Position {
                epoch,
                iter: i,
                iters_per_epoch: iters,
            },
            history,
        )?;
        first_lr.get_or_insert(lr);
        let batch = stateless_batch(train, ids, &sampler, Sampling::Random(&mut rng))?;
        let (l, probs) = train_step(net, adam, &batch.clips, &batch.labels, lr, rng.gen())?;
        loss += l;
        correct += probs.iter().zip(&batch.labels).filter(|(p, &y)| argmax(p) == y).count();
        seen += batch.labels.len();
    }
    Ok(EpochStats {
        loss: loss / seen.max(1) as f64,
        acc: correct as f64 / seen.max(1) as f64,
        lr: first_lr.unwrap_or(f64::NAN),
    })
}

fn stateful_epoch<T: Real>(
    net: &mut Network<T>,
    adam: &mut AdamState<T>,
    train: &[PreparedVideo],
    cfg: &TrainConfig,
    epoch: usize,
    history: &[f64],
) -> Result<EpochStats> {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let lengths: Vec<(usize, usize)> = train.iter().enumerate().map(|(i, v)| (i, v.len)).collect();
    let sched = make_stateful_schedule(&lengths, cfg.batch_size, cfg.clip_len, &cfg.bins, true, &mut rng)?;
    let iters: usize = sched
        .groups
        .iter()
        .map(|g| {
            let t = sched.windows_total(g);
            t - t / 2
        })
        .sum();
    let mut cursor = WindowCursor::default();
    let (mut loss, mut trained_rows, mut correct, mut videos) = (0.0, 0, 0, 0);
    let mut iter = 0;
    let mut first_lr = None;
    for group in &sched.groups {
        let mut per_row: Vec<Vec<Vec<f64>>> = vec![Vec::new(); group.videos.len()];
        for w in sched.group_windows(group, train)? {
            cursor.accept(&w)?;
            apply_resets(net, &w, cfg.carry_state)?;
            let probs = if w.update_weights {
                let lr = cfg.schedule.lr_with_history(
                    Position {
                        epoch,
                        iter,
                        iters_per_epoch: iters,
                    },
                    history,
                )?;
                first_lr.get_or_insert(lr);
                iter += 1;
                let (l, probs) = train_step(net, adam, &w.clips, &w.labels, lr, rng.gen())?;
                loss += l;
                trained_rows += w.labels.len();
                probs
            } else {
                let pass = Pass {
                    record: false,
                    ..Pass::train(rng.gen())
                };
                let logits = net.forward_logits(&w.clips.cast::<T>(), pass)?;
                softmax_rows(&logits)?
            };
            for (row, p) in per_row.iter_mut().zip(probs) {
                row.push(p);
            }
        }
        for ((windows, &id), &padded) in per_row.iter().zip(&group.videos).zip(&group.padded) {
            if padded {
                continue;
            }
            let p = aggregate_predictions(windows, cfg.weight_exponent)?;
            correct += (argmax(&p) == train[id].label) as usize;
            videos += 1;
        }
    }
    net.reset_states();
    Ok(EpochStats {
        loss: loss / trained_rows.max(1) as f64,
        acc: correct as f64 / videos.max(1) as f64,
        lr: first_lr.unwrap_or(f64::NAN),
    })
}

/// Per-video class probabilities in INFER mode.
///
/// Stateless networks see one centered window per video. Stateful networks
/// run every window of each video's reduced length and aggregate them with
/// the window weights.
pub fn predict_videos<T: Real>(
    net: &mut Network<T>,
    videos: &[PreparedVideo],
    cfg: &EvalConfig,
) -> Result<Vec<Vec<f64>>> {
    if videos.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let mut out = vec![Vec::new(); videos.len()];
    match net.architecture() {
        Architecture::Stateless => {
            let sampler = WindowSampler::new(net.spec().config.frames);
            let ids: Vec<usize> = (0..videos.len()).collect();
            for chunk in ids.chunks(cfg.batch_size.max(1)) {
                let b = stateless_batch::<ChaCha8Rng>(videos, chunk, &sampler, Sampling::Center)?;
                let logits = net.forward_logits(&b.clips.cast::<T>(), Pass::infer())?;
                for (&id, p) in chunk.iter().zip(softmax_rows(&logits)?) {
                    out[id] = p;
                }
            }
        }
        Architecture::Stateful => {
            let lengths: Vec<(usize, usize)> = videos.iter().enumerate().map(|(i, v)| (i, v.len)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let sched = make_stateful_schedule(
                &lengths,
                cfg.batch_size.max(1),
                cfg.clip_len,
                &cfg.bins,
                false,
                &mut rng,
            )?;
            for group in &sched.groups {
                let mut per_row: Vec<Vec<Vec<f64>>> = vec![Vec::new(); group.videos.len()];
                for w in sched.group_windows(group, videos)? {
                    apply_resets(net, &w, cfg.carry_state)?;
                    let logits = net.forward_logits(&w.clips.cast::<T>(), Pass::infer())?;
                    for (row, p) in per_row.iter_mut().zip(softmax_rows(&logits)?) {
                        row.push(p);
                    }
                }
                for (windows, &id) in per_row.iter().zip(&group.videos) {
                    out[id] = aggregate_predictions(windows, cfg.weight_exponent)?;
                }
            }
            net.reset_states();
        }
    }
    Ok(out)
}

pub fn evaluate<T: Real>(net: &mut Network<T>, videos: &[PreparedVideo], cfg: &EvalConfig) -> Result<MetricsReport> {
    let probs = predict_videos(net, videos, cfg)?;
    let labels: Vec<usize> = videos.iter().map(|v| v.label).collect();
    MetricsReport::from_probabilities(&probs, &labels, net.num_classes())
}

struct RunState<T> {
    adam: AdamState<T>,
    start_epoch: usize,
    history: Vec<f64>,
    logs: Vec<EpochLog>,
    best: Option<(usize, f64, Checkpoint)>,
}

const LOG_FILE: &str = "log.csv";
const BEST_FILE: &str = "best.clck";
const LAST_FILE: &str = "last.clck";

fn write_log(dir: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if logs.is_empty() {
        w.write_record([
            "epoch",
            "lr",
            "train_loss",
            "train_acc",
            "val_loss",
            "val_acc",
            "seconds",
        ])?;
    }
    for l in logs {
        w.serialize(l)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&dir.join(LOG_FILE), &bytes)
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<EpochLog>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(Error::at_path(path))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn resume_state<T: Real>(net: &mut Network<T>, cfg: &TrainConfig, dir: &Path) -> Result<Option<RunState<T>>> {
    let last = dir.join(LAST_FILE);
    if !last.exists() {
        return Ok(None);
    }
    let ck = Checkpoint::read(&last)?;
    load_into(net, &ck)?;
    let meta = |k: &str| {
        ck.metadata
            .get(k)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks `{k}`")))
    };
    let parse_err = |k: &str| Error::invalid(format!("bad `{k}` in checkpoint"));
    let batch: usize = meta("train.batch_size")?
        .parse()
        .map_err(|_| parse_err("train.batch_size"))?;
    if batch != cfg.batch_size {
        return Err(Error::invalid(format!(
            "checkpoint was trained with batch size {batch}, config says {}",
            cfg.batch_size
        )));
    }
    let start_epoch: usize = meta("train.epoch")?.parse().map_err(|_| parse_err("train.epoch"))?;
    let step: u64 = meta("train.adam_step")?
        .parse()
        .map_err(|_| parse_err("train.adam_step"))?;
    let history: Vec<f64> = match meta("train.val_history")?.as_str() {
        "" => Vec::new(),
        s => s
            .split(',')
            .map(|x| x.parse().map_err(|_| parse_err("train.val_history")))
            .collect::<Result<_>>()?,
    };
    let mut adam = AdamState::new(cfg.adam);
    adam.restore(step, net, &ck.records)?;
    let mut logs = if dir.join(LOG_FILE).exists() {
        read_log(dir.join(LOG_FILE))?
    } else {
        Vec::new()
    };
    logs.retain(|l| l.epoch <= start_epoch);
    let best = if dir.join(BEST_FILE).exists() {
        let b = Checkpoint::read(dir.join(BEST_FILE))?;
        let epoch = b.metadata.get("train.epoch").and_then(|s| s.parse().ok()).unwrap_or(0);
        let acc = b
            .metadata
            .get("train.val_acc")
            .and_then(|s| s.parse().ok())
            .unwrap_or(f64::NEG_INFINITY);
        Some((epoch, acc, b))
    } else {
        None
    };
    Ok(Some(RunState {
        adam,
        start_epoch,
        history,
        logs,
        best,
    }))
}

fn run<T: Real>(
    net: &mut Network<T>,
    train: &[PreparedVideo],
    validation: &[PreparedVideo],
    cfg: &TrainConfig,
    epoch_fn: fn(
        &mut Network<T>,
        &mut AdamState<T>,
        &[PreparedVideo],
        &TrainConfig,
        usize,
        &[f64],
    ) -> Result<EpochStats>,
) -> Result<TrainSummary> {
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    cfg.schedule.validate()?;
    let epochs = cfg.total_epochs()?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(Error::at_path(dir))?;
    }
    let resumed = match (&cfg.out_dir, cfg.resume) {
        (Some(dir), true) => resume_state(net, cfg, dir)?,
        _ => None,
    };
    let mut st = resumed.unwrap_or_else(|| RunState {
        adam: AdamState::new(cfg.adam),
        start_epoch: 0,
        history: Vec::new(),
        logs: Vec::new(),
        best: None,
    });
    let eval_cfg = cfg.eval_config();

    for epoch in st.start_epoch..epochs {
        let started = Instant::now();
        if let (Some(phase), Some((_, _, best))) = (cfg.schedule.phase_starting(epoch), &st.best) {
            if phase.reload_best {
                load_into(net, best)?;
            }
        }
        let stats = epoch_fn(net, &mut st.adam, train, cfg, epoch, &st.history)?;
        let (val_loss, val_acc) = if validation.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let r = evaluate(net, validation, &eval_cfg)?;
            (r.loss, r.accuracy)
        };
        // Without a validation split the training accuracy decides.
        let score = if validation.is_empty() { stats.acc } else { val_acc };
        st.history.push(score);
        let improved = st.best.as_ref().is_none_or(|(_, acc, _)| score > *acc);
        if improved {
            let mut ck = Checkpoint::from_network(net);
            ck.metadata.insert("train.epoch".into(), (epoch + 1).to_string());
            ck.metadata.insert("train.val_acc".into(), score.to_string());
            if let Some(dir) = &cfg.out_dir {
                ck.write(dir.join(BEST_FILE))?;
            }
            st.best = Some((epoch + 1, score, ck));
        }
        let log = EpochLog {
            epoch: epoch + 1,
            lr: stats.lr,
            train_loss: stats.loss,
            train_acc: stats.acc,
            val_loss,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        };
        if cfg.progress {
            eprintln!(
                "epoch {:>3}  lr {:.3e}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}  {:.1}s",
                log.epoch, log.lr, log.train_loss, log.train_acc, log.val_loss, log.val_acc, log.seconds
            );
        }
        st.logs.push(log);
        if let Some(dir) = &cfg.out_dir {
            write_log(dir, &st.logs)?;
            let mut ck = Checkpoint::from_network(net);
            let meta: BTreeMap<String, String> = [
                ("train.epoch", (epoch + 1).to_string()),
                ("train.adam_step", st.adam.step.to_string()),
                ("train.val_history", list(&st.history)),
                ("train.batch_size", cfg.batch_size.to_string()),
                ("train.seed", cfg.seed.to_string()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
            ck.metadata.extend(meta);
            ck.records.extend(st.adam.to_records());
            ck.write(dir.join(LAST_FILE))?;
        }
    }
    let (best_epoch, best_val_acc) = st.best.as_ref().map_or((None, f64::NAN), |(e, a, _)| (Some(*e), *a));
    Ok(TrainSummary {
        logs: st.logs,
        best_epoch,
        best_val_acc,
        steps: st.adam.step,
    })
}

/// Trains a stateless network on random windows of each video.
pub fn train_stateless<T: Real>(
    net: &mut Network<T>,
    train: &[PreparedVideo],
    validation: &[PreparedVideo],
    cfg: &TrainConfig,
) -> Result<TrainSummary> {
    if net.architecture() != Architecture::Stateless {
        return Err(Error::invalid("train_stateless needs a stateless network"));
    }
    run(net, train, validation, cfg, stateless_epoch)
}

/// Trains a stateful network over the length-binned window stream, updating
/// weights only on the second half of each video's windows.
pub fn train_stateful<T: Real>(
    net: &mut Network<T>,
    train: &[PreparedVideo],
    validation: &[PreparedVideo],
    cfg: &TrainConfig,
) -> Result<TrainSummary> {
    if net.architecture() != Architecture::Stateful {
        return Err(Error::invalid("train_stateful needs a stateful network"));
    }
    run(net, train, validation, cfg, stateful_epoch)
}

/// Dispatches on the network's architecture.
pub fn train<T: Real>(
    net: &mut Network<T>,
    train: &[PreparedVideo],
    validation: &[PreparedVideo],
    cfg: &TrainConfig,
) -> Result<TrainSummary> {
    match net.architecture() {
        Architecture::Stateless => train_stateless(net, train, validation, cfg),
        Architecture::Stateful => train_stateful(net, train, validation, cfg),
    }
}
