use super::*;
use crate::data::{prepare_video, BinSchedule, ClipBatch, PreparedVideo, SynthSpec};
use crate::error::Error;
use crate::models::{ArchConfig, Architecture, Network, NetworkSpec};
use crate::tensor::Tensor;

fn tiny_net(arch: Architecture, classes: usize, seed: u64) -> Network<f32> {
    let mut cfg = match arch {
        Architecture::Stateless => ArchConfig::stateless(classes),
        Architecture::Stateful => ArchConfig::stateful(classes),
    }
    .scaled(8, [4, 4, 6, 8], [2, 4], 8);
    if arch == Architecture::Stateless {
        cfg.frames = 10;
    }
    let spec = match arch {
        Architecture::Stateless => NetworkSpec::stateless(cfg),
        Architecture::Stateful => NetworkSpec::stateful(cfg),
    }
    .unwrap();
    Network::new(spec, seed).unwrap()
}

fn videos(n: usize, lengths: (usize, usize), seed: u64) -> Vec<PreparedVideo> {
    let spec = SynthSpec {
        num_classes: 3,
        videos_per_class: n.div_ceil(3),
        length_range: lengths,
        late_cue: false,
        seed,
        size: 16,
    };
    (0..n)
        .map(|i| prepare_video(&spec.video(i).unwrap(), 8, 4500.0).unwrap())
        .collect()
}

fn quick(cfg: TrainConfig, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs: Some(epochs),
        schedule: ScheduleSpec::Constant { lr: 1e-3 },
        ..cfg
    }
}

#[test]
fn cursor_rejects_out_of_order_windows() {
    let w = |t: usize| ClipBatch {
        clips: Tensor::zeros(&[1, 1, 1, 1, 1]),
        labels: vec![0],
        videos: vec![0],
        reset_before: vec![t == 1],
        update_weights: true,
        window: t,
        windows_total: 3,
    };
    let mut c = WindowCursor::default();
    c.accept(&w(1)).unwrap();
    c.accept(&w(2)).unwrap();
    assert!(matches!(
        c.accept(&w(2)),
        Err(Error::OutOfOrderWindow { expected: 3, got: 2 })
    ));
    let mut c = WindowCursor::default();
    assert!(matches!(
        c.accept(&w(2)),
        Err(Error::OutOfOrderWindow { expected: 1, got: 2 })
    ));
    let mut c = WindowCursor::default();
    for t in [1, 2, 3, 1] {
        c.accept(&w(t)).unwrap();
    }
}

#[test]
fn fourteen_windows_give_seven_updates() {
    let mut net = tiny_net(Architecture::Stateful, 3, 0);
    let data = videos(6, (112, 119), 1);
    let cfg = quick(TrainConfig::stateful(), 1);
    let s = train_stateful(&mut net, &data, &[], &cfg).unwrap();
    assert_eq!(s.steps, 7);
}

#[test]
fn warmup_windows_never_touch_gradients() {
    let mut net = tiny_net(Architecture::Stateful, 3, 0);
    let data = videos(6, (112, 119), 1);
    let cfg = quick(TrainConfig::stateful(), 1);
    net.zero_grad();
    let bins = BinSchedule::default();
    let lengths: Vec<(usize, usize)> = data.iter().enumerate().map(|(i, v)| (i, v.len)).collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let sched = crate::data::make_stateful_schedule(&lengths, 6, 8, &bins, true, &mut rng).unwrap();
    for w in sched.group_windows(&sched.groups[0], &data).unwrap() {
        if w.update_weights {
            break;
        }
        let pass = crate::models::Pass {
            record: false,
            ..crate::models::Pass::train(0)
        };
        net.forward_logits(&w.clips, pass).unwrap();
        let mut norm = 0.0f32;
        net.visit_params(&mut |_, t| norm += t.grad().unwrap().iter().map(|g| g * g).sum::<f32>());
        assert_eq!(norm, 0.0);
    }
    drop(cfg);
}

#[test]
fn initial_loss_is_near_uniform() {
    for arch in [Architecture::Stateless, Architecture::Stateful] {
        let mut net = tiny_net(arch, 3, 5);
        let data = videos(12, (40, 60), 2);
        let r = evaluate(&mut net, &data, &TrainConfig::stateless().eval_config()).unwrap();
        let ln3 = 3f64.ln();
        assert!((r.loss - ln3).abs() < 0.02 * ln3, "{arch}: {}", r.loss);
    }
}

fn strip_time(logs: &[EpochLog]) -> Vec<EpochLog> {
    logs.iter()
        .map(|l| EpochLog {
            seconds: 0.0,
            ..l.clone()
        })
        .collect()
}

#[test]
fn seeded_runs_repeat_exactly() {
    for arch in [Architecture::Stateless, Architecture::Stateful] {
        let data = videos(12, (40, 70), 3);
        let (train_set, val) = data.split_at(9);
        let base = match arch {
            Architecture::Stateless => TrainConfig::stateless(),
            Architecture::Stateful => TrainConfig::stateful(),
        };
        let cfg = TrainConfig {
            batch_size: 3,
            ..quick(base, 2)
        };
        let mut a = tiny_net(arch, 3, 1);
        let mut b = tiny_net(arch, 3, 1);
        let ra = train(&mut a, train_set, val, &cfg).unwrap();
        let rb = train(&mut b, train_set, val, &cfg).unwrap();
        assert_eq!(strip_time(&ra.logs), strip_time(&rb.logs));
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    for arch in [Architecture::Stateless, Architecture::Stateful] {
        let data = videos(12, (40, 70), 4);
        let (train_set, val) = data.split_at(9);
        let dir = tempfile::tempdir().unwrap();
        let base = match arch {
            Architecture::Stateless => TrainConfig::stateless(),
            Architecture::Stateful => TrainConfig::stateful(),
        };
        let cfg = TrainConfig {
            batch_size: 3,
            schedule: ScheduleSpec::Cyclical {
                min_lr: 1e-4,
                max_lr: 2e-3,
                half_cycle: 1.5,
            },
            epochs: Some(3),
            ..base
        };
        let mut full = tiny_net(arch, 3, 2);
        let whole = train(&mut full, train_set, val, &cfg).unwrap();

        let interrupted = TrainConfig {
            epochs: Some(2),
            out_dir: Some(dir.path().to_path_buf()),
            ..cfg.clone()
        };
        let mut net = tiny_net(arch, 3, 2);
        train(&mut net, train_set, val, &interrupted).unwrap();
        let resumed_cfg = TrainConfig {
            epochs: Some(3),
            resume: true,
            ..interrupted
        };
        let mut fresh = tiny_net(arch, 3, 99);
        let resumed = train(&mut fresh, train_set, val, &resumed_cfg).unwrap();
        assert_eq!(resumed.steps, whole.steps);
        let on_disk = read_log(dir.path().join("log.csv")).unwrap();
        assert_eq!(on_disk.len(), 3);
        for (a, b) in whole.logs.iter().zip(&on_disk) {
            for (x, y) in [
                (a.lr, b.lr),
                (a.train_loss, b.train_loss),
                (a.train_acc, b.train_acc),
                (a.val_loss, b.val_loss),
                (a.val_acc, b.val_acc),
            ] {
                assert!((x - y).abs() <= 1e-6, "{arch} epoch {}: {x} vs {y}", a.epoch);
            }
        }
        assert!(dir.path().join("best.clck").exists());
    }
}

#[test]
fn best_checkpoint_tracks_maximum() {
    let data = videos(12, (40, 70), 5);
    let (train_set, val) = data.split_at(9);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        batch_size: 3,
        out_dir: Some(dir.path().to_path_buf()),
        ..quick(TrainConfig::stateless(), 3)
    };
    let mut net = tiny_net(Architecture::Stateless, 3, 3);
    let s = train(&mut net, train_set, val, &cfg).unwrap();
    let best = s.logs.iter().map(|l| l.val_acc).fold(f64::NEG_INFINITY, f64::max);
    let ck = crate::models::Checkpoint::read(dir.path().join("best.clck")).unwrap();
    assert_eq!(ck.metadata["train.val_acc"].parse::<f64>().unwrap(), best);
    let text = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert!(text.starts_with("epoch,lr,train_loss,train_acc,val_loss,val_acc,seconds\n"));
}

#[test]
fn architecture_is_checked() {
    let mut net = tiny_net(Architecture::Stateless, 3, 0);
    let data = videos(3, (40, 50), 0);
    assert!(train_stateful(&mut net, &data, &[], &quick(TrainConfig::stateful(), 1)).is_err());
    assert!(matches!(
        train_stateless(&mut net, &[], &[], &quick(TrainConfig::stateless(), 1)),
        Err(Error::EmptySplit(_))
    ));
}

#[test]
fn single_repetition_bench() {
    let mut net = tiny_net(Architecture::Stateless, 3, 0);
    let data = videos(1, (40, 40), 0);
    let r = bench_inference(&mut net, &data, 1, 0, &EvalConfig::default()).unwrap();
    assert_eq!(r.samples, 1);
    assert_eq!(r.p50, r.mean);
    assert!((r.fps - 40.0 / r.mean).abs() < 1e-9 * r.fps);
}

#[test]
fn network_range_test_runs() {
    let data = videos(6, (40, 60), 6);
    for arch in [Architecture::Stateless, Architecture::Stateful] {
        let mut net = tiny_net(arch, 3, 0);
        let mut target = NetworkRangeTarget::new(&mut net, &data, 3, BinSchedule::default(), 0).unwrap();
        let recs = lr_range_test(&mut target, 1e-5, 1e-2, 12).unwrap();
        assert!(!recs.is_empty());
        assert!(range_csv(&recs)
            .unwrap()
            .starts_with(b"iter,lr,smoothed_loss,raw_loss\n"));
    }
}
