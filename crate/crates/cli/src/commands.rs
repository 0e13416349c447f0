use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cle_core::data::{
    generate_synthetic_dataset, length_histogram, prepare_records, prepare_video, write_atomic, BinSchedule,
    DatasetManifest, PreparedVideo, SynthSpec, DEFAULT_EDGES, MAX_DEPTH,
};
use cle_core::gradcheck::{run_suite, SUITE_OPS};
use cle_core::models::{load_checkpoint, ArchConfig, Architecture, Network, NetworkSpec};
use cle_core::train::{
    bench_inference, evaluate, lr_range_test, range_csv, train as train_network, BenchReport, EvalConfig,
    NetworkRangeTarget,
};
use cle_core::{Precision, Real};

use crate::config::RunConfig;
use crate::{BenchArgs, CliError, EvalArgs, GradcheckArgs, RangeArgs, SplitName, StatsArgs, SynthArgs, TrainArgs};

type CliResult<T = ()> = Result<T, CliError>;

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    Ok(write_atomic(path, bytes)?)
}

fn is_nonempty_dir(path: &Path) -> bool {
    std::fs::read_dir(path).is_ok_and(|mut d| d.next().is_some())
}

fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

pub fn synth(a: SynthArgs) -> CliResult {
    if is_nonempty_dir(&a.out) {
        if !a.force {
            return Err(CliError::usage(format!(
                "{} is not empty (pass --force to replace it)",
                a.out.display()
            )));
        }
        for stale in [a.out.join("videos"), a.out.join("manifest.csv")] {
            let removed = if stale.is_dir() {
                std::fs::remove_dir_all(&stale)
            } else if stale.exists() {
                std::fs::remove_file(&stale)
            } else {
                Ok(())
            };
            removed.map_err(|e| CliError::data(format!("{}: {e}", stale.display())))?;
        }
    }
    let spec = SynthSpec {
        num_classes: a.classes,
        videos_per_class: a.per_class,
        length_range: (a.len_min, a.len_max),
        late_cue: a.late_cue,
        seed: a.seed,
        size: a.size,
    };
    let manifest = generate_synthetic_dataset(&spec, &a.out)?;
    eprintln!("wrote {} videos", manifest.len());
    println!("{}", a.out.join("manifest.csv").display());
    Ok(())
}

fn parse_edges(text: &str) -> CliResult<Vec<usize>> {
    let edges: Vec<usize> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| CliError::usage(format!("bad bin edge `{s}`"))))
        .collect::<CliResult<_>>()?;
    if edges.is_empty() {
        return Err(CliError::usage("--edges needs at least one edge"));
    }
    Ok(edges)
}

pub fn stats(a: StatsArgs) -> CliResult {
    let edges = match &a.edges {
        Some(text) => parse_edges(text)?,
        None => DEFAULT_EDGES.to_vec(),
    };
    let bins = BinSchedule::with_clip_len(edges, a.clip_len)?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let hist = length_histogram(
        manifest.records.iter().map(|r| (r.label, r.frames)),
        manifest.num_classes(),
        &bins,
    );
    let csv = hist.to_csv()?;
    match &a.out {
        Some(path) => write_file(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// Config with paths made absolute relative to the config file's directory.
fn load_config(path: &Path) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let base = absolute(dir);
    for p in [&mut cfg.data.manifest, &mut cfg.out_dir] {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

struct Splits {
    num_classes: usize,
    train: Vec<PreparedVideo>,
    validation: Vec<PreparedVideo>,
    test: Vec<PreparedVideo>,
}

fn load_splits(cfg: &RunConfig, manifest: &DatasetManifest, size: usize, which: &[SplitName]) -> CliResult<Splits> {
    let split = manifest.split(&cfg.split_rule()?, cfg.data.validation_fraction, cfg.seed()?)?;
    let load = |ids: &[usize], name: SplitName| -> CliResult<Vec<PreparedVideo>> {
        if which.contains(&name) {
            Ok(prepare_records(manifest, ids, size, cfg.data.max_depth)?)
        } else {
            Ok(Vec::new())
        }
    };
    Ok(Splits {
        num_classes: manifest.num_classes(),
        train: load(&split.train, SplitName::Train)?,
        validation: load(&split.validation, SplitName::Validation)?,
        test: load(&split.test, SplitName::Test)?,
    })
}

fn train_with<T: Real>(cfg: &RunConfig, data: &Splits, resume: bool, quiet: bool) -> CliResult {
    let spec = cfg.network_spec(data.num_classes)?;
    let mut net = Network::<T>::new(spec, cfg.seed()?)?;
    let mut tc = cfg.train_config()?;
    tc.resume = resume;
    tc.progress = !quiet;
    let summary = train_network(&mut net, &data.train, &data.validation, &tc)?;
    match summary.best_epoch {
        Some(e) => println!(
            "best epoch {e}: accuracy {:.4}; checkpoints in {}",
            summary.best_val_acc,
            cfg.out_dir.display()
        ),
        None => println!("no epochs run; checkpoints in {}", cfg.out_dir.display()),
    }
    Ok(())
}

const ECHO_FILE: &str = "config.toml";

pub fn train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(&a.config)?;
    if let Some(m) = a.model {
        cfg.model = m;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = Some(e);
    }
    let cfg = cfg.resolve()?;
    let out = cfg.out_dir.clone();
    let has_run = out.join("last.clck").exists();
    if a.resume {
        let echoed = out.join(ECHO_FILE);
        if echoed.exists() {
            let mut prev = RunConfig::load(&echoed)?;
            prev.train.epochs = cfg.train.epochs;
            if prev != cfg {
                return Err(CliError::usage(format!(
                    "config differs from the one the run in {} started with",
                    out.display()
                )));
            }
        }
    } else if has_run && !a.force {
        return Err(CliError::usage(format!(
            "{} already holds a run (pass --resume or --force)",
            out.display()
        )));
    }
    let manifest = cfg.manifest(Path::new("."))?;
    let data = load_splits(
        &cfg,
        &manifest,
        cfg.data.size,
        &[SplitName::Train, SplitName::Validation],
    )?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
    write_file(&out.join(ECHO_FILE), cfg.to_toml().as_bytes())?;
    match cfg.precision {
        Precision::Single => train_with::<f32>(&cfg, &data, a.resume, a.quiet),
        Precision::Double => train_with::<f64>(&cfg, &data, a.resume, a.quiet),
    }
}

fn range_with<T: Real>(cfg: &RunConfig, data: &Splits, a: &RangeArgs) -> CliResult<Vec<u8>> {
    let mut net = Network::<T>::new(cfg.network_spec(data.num_classes)?, cfg.seed()?)?;
    let tc = cfg.train_config()?;
    let mut target = NetworkRangeTarget::new(&mut net, &data.train, tc.batch_size, tc.bins.clone(), tc.seed)?;
    let records = lr_range_test(&mut target, a.start, a.end, a.iters)?;
    if let Some(best) = records
        .iter()
        .min_by(|x, y| x.smoothed_loss.total_cmp(&y.smoothed_loss))
    {
        eprintln!("lowest smoothed loss {:.4} at lr {:.3e}", best.smoothed_loss, best.lr);
    }
    Ok(range_csv(&records)?)
}

pub fn lr_range(a: RangeArgs) -> CliResult {
    if a.iters < cle_core::train::RANGE_MIN_ITERS {
        return Err(CliError::usage(format!(
            "--iters must be at least {}",
            cle_core::train::RANGE_MIN_ITERS
        )));
    }
    if !(a.start > 0.0 && a.end > a.start) {
        return Err(CliError::usage("need 0 < --start < --end"));
    }
    let cfg = load_config(&a.config)?.resolve()?;
    let manifest = cfg.manifest(Path::new("."))?;
    let data = load_splits(&cfg, &manifest, cfg.data.size, &[SplitName::Train])?;
    let csv = match cfg.precision {
        Precision::Single => range_with::<f32>(&cfg, &data, &a)?,
        Precision::Double => range_with::<f64>(&cfg, &data, &a)?,
    };
    let out = a.out.clone().unwrap_or_else(|| cfg.out_dir.join("lr_range.csv"));
    write_file(&out, &csv)?;
    println!("{}", out.display());
    Ok(())
}

fn eval_with<T: Real>(a: &EvalArgs, cfg: &RunConfig) -> CliResult<String> {
    let (mut net, _) = load_checkpoint::<T>(&a.checkpoint)?;
    let manifest = match &a.manifest {
        Some(p) => DatasetManifest::read(p)?,
        None => cfg.manifest(Path::new("."))?,
    };
    if manifest.num_classes() > net.num_classes() {
        return Err(CliError::data(format!(
            "manifest has {} classes but the checkpoint predicts {}",
            manifest.num_classes(),
            net.num_classes()
        )));
    }
    let which = match a.split {
        SplitName::All => vec![SplitName::Train, SplitName::Validation, SplitName::Test],
        s => vec![s],
    };
    let size = net.spec().config.size;
    let data = load_splits(cfg, &manifest, size, &which)?;
    let videos: Vec<PreparedVideo> = [data.train, data.validation, data.test].concat();
    if videos.is_empty() {
        return Err(CliError::data(
            format!("split `{:?}` has no videos", a.split).to_lowercase(),
        ));
    }
    let tc = cfg.train_config()?;
    let ec = EvalConfig {
        batch_size: tc.batch_size,
        ..tc.eval_config()
    };
    let report = evaluate(&mut net, &videos, &ec)?;
    let out = a.out.clone().unwrap_or_else(|| {
        let dir = a.checkpoint.parent().unwrap_or(Path::new("."));
        dir.join(format!("eval-{:?}", a.split).to_lowercase())
    });
    write_file(&out.join("confusion.csv"), report.confusion_csv()?.as_bytes())?;
    write_file(&out.join("per_class.csv"), report.per_class_csv()?.as_bytes())?;
    let summary = report.summary(None);
    write_file(&out.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    if let Some(min) = a.min_accuracy {
        if report.accuracy < min {
            return Err(CliError::failed(format!("accuracy {:.4} below {min}", report.accuracy)));
        }
    }
    Ok(summary)
}

pub fn eval(a: EvalArgs) -> CliResult {
    let beside = a.checkpoint.parent().map(|d| d.join(ECHO_FILE));
    let cfg = match (&a.config, beside) {
        (Some(p), _) => load_config(p)?,
        (None, Some(p)) if p.exists() => load_config(&p)?,
        _ => RunConfig::default(),
    }
    .resolve()?;
    match cfg.precision {
        Precision::Single => eval_with::<f32>(&a, &cfg).map(drop),
        Precision::Double => eval_with::<f64>(&a, &cfg).map(drop),
    }
}

fn bench_net<T: Real>(
    label: String,
    mut net: Network<T>,
    a: &BenchArgs,
    rows: &mut Vec<(String, BenchReport)>,
) -> CliResult {
    let size = net.spec().config.size;
    let videos: Vec<PreparedVideo> = match &a.videos {
        Some(path) => {
            let m = DatasetManifest::read(path)?;
            let ids: Vec<usize> = (0..m.len()).collect();
            prepare_records(&m, &ids, size, MAX_DEPTH)?
        }
        None => {
            let spec = SynthSpec {
                num_classes: 2,
                videos_per_class: a.synthetic.div_ceil(2),
                length_range: (a.frames, a.frames),
                late_cue: false,
                seed: a.seed,
                size: size.max(8),
            };
            (0..a.synthetic)
                .map(|i| prepare_video(&spec.video(i)?, size, MAX_DEPTH))
                .collect::<cle_core::Result<_>>()?
        }
    };
    let report = bench_inference(&mut net, &videos, a.reps, a.warmup, &EvalConfig::default())?;
    rows.push((label, report));
    Ok(())
}

fn bench_all<T: Real>(a: &BenchArgs) -> CliResult<Vec<(String, BenchReport)>> {
    let mut rows = Vec::new();
    for path in &a.checkpoint {
        let (net, _) = load_checkpoint::<T>(path)?;
        bench_net(path.display().to_string(), net, a, &mut rows)?;
    }
    for &arch in &a.model {
        let spec = match arch {
            Architecture::Stateless => NetworkSpec::stateless(ArchConfig::stateless(a.classes))?,
            Architecture::Stateful => NetworkSpec::stateful(ArchConfig::stateful(a.classes))?,
        };
        bench_net(arch.to_string(), Network::<T>::new(spec, a.seed)?, a, &mut rows)?;
    }
    Ok(rows)
}

pub fn bench(a: BenchArgs) -> CliResult {
    if a.checkpoint.is_empty() && a.model.is_empty() {
        return Err(CliError::usage("pass at least one --checkpoint or --model"));
    }
    if a.reps == 0 {
        return Err(CliError::usage("--reps must be at least 1"));
    }
    let rows = match a.precision {
        Precision::Single => bench_all::<f32>(&a)?,
        Precision::Double => bench_all::<f64>(&a)?,
    };
    let mut csv = String::from("model,mean_s,p50_s,p95_s,fps,samples\n");
    for (name, r) in &rows {
        let _ = writeln!(
            csv,
            "{name},{:.6},{:.6},{:.6},{:.2},{}",
            r.mean, r.p50, r.p95, r.fps, r.samples
        );
    }
    print!("{csv}");
    if let Some(path) = &a.out {
        write_file(path, csv.as_bytes())?;
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult {
    if a.precision != Precision::Double {
        return Err(CliError::usage("gradient checks run in double precision only"));
    }
    if a.seeds == 0 {
        return Err(CliError::usage("--seeds must be at least 1"));
    }
    let rows = run_suite(a.seed..a.seed + a.seeds, a.floor)?;
    println!("{:<24}{:>8}{:>16}  status", "op", "seeds", "max_rel_error");
    let mut failed = Vec::new();
    for op in SUITE_OPS {
        let worst = rows
            .iter()
            .filter(|r| r.op == op)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max);
        let ok = worst < a.tolerance;
        if !ok {
            failed.push(op);
        }
        println!(
            "{op:<24}{:>8}{worst:>16.3e}  {}",
            a.seeds,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::failed(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
