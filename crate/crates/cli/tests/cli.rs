use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cle(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cle"))
        .current_dir(dir)
        .env_remove("CLE_SEED")
        .args(args)
        .output()
        .expect("cle runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cle(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    cle(dir, args).status.code().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    files
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

const SYNTH: [&str; 12] = [
    "synth",
    "--classes",
    "3",
    "--per-class",
    "6",
    "--len-min",
    "20",
    "--len-max",
    "32",
    "--size",
    "16",
    "--seed",
];

fn synth(dir: &Path, out: &str) {
    let mut args = SYNTH.to_vec();
    args.extend(["7", "--out", out]);
    ok(dir, &args);
}

fn write_config(dir: &Path, model: &str, extra: &str) -> PathBuf {
    let frames = if model == "stateless" { "frames = 10\n" } else { "" };
    let text = format!(
        "model = \"{model}\"\nseed = 3\nout_dir = \"run-{model}\"\n\n[data]\nmanifest = \"data/manifest.csv\"\n\
         size = 8\nvalidation_fraction = 0.25\n\n[network]\n{frames}main_widths = [4, 4, 6, 8]\n\
         support_widths = [2, 4]\ndecision_width = 8\n\n[train]\nbatch_size = 3\n{extra}"
    );
    let path = dir.join(format!("{model}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn synth_is_deterministic_and_in_range() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "a");
    synth(dir.path(), "b");
    let (a, b) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    assert_eq!(a.len(), 19);
    assert_eq!(a, b);
    let manifest = rows(&dir.path().join("a/manifest.csv"));
    assert_eq!(manifest[0], ["path", "label", "subject", "camera", "frames"]);
    let labels: std::collections::BTreeSet<&str> = manifest[1..].iter().map(|r| r[1].as_str()).collect();
    assert_eq!(labels.len(), 3);
    for r in &manifest[1..] {
        let len: usize = r[4].parse().unwrap();
        assert!((20..=32).contains(&len));
    }
    let mut again = SYNTH.to_vec();
    again.extend(["7", "--out", "a"]);
    assert_eq!(code(dir.path(), &again), 2);
    again.push("--force");
    ok(dir.path(), &again);
    assert_eq!(tree(&dir.path().join("a")), b);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str, seed: &str| {
        let mut args = SYNTH[..11].to_vec();
        args.extend(["--out", out]);
        let status = Command::new(env!("CARGO_BIN_EXE_cle"))
            .current_dir(dir.path())
            .env("CLE_SEED", seed)
            .args(&args)
            .output()
            .unwrap();
        assert!(status.status.success());
        tree(&dir.path().join(out))
    };
    let env7 = run("e7", "7");
    synth(dir.path(), "flag7");
    assert_eq!(env7, tree(&dir.path().join("flag7")));
    assert_ne!(env7, run("e8", "8"));
}

#[test]
fn stats_histogram() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("m.csv"),
        "path,label,subject,camera,frames\na,0,1,1,46\nb,0,1,1,300\nc,1,1,1,112\nd,1,1,1,33\n",
    )
    .unwrap();
    let csv = ok(dir.path(), &["stats", "--manifest", "m.csv"]);
    let table: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(table[0][0], "class");
    let col = |edge: &str| table[0].iter().position(|&h| h == edge).unwrap();
    assert_eq!(table[1][col("40")], "1");
    assert_eq!(table[1][col("208")], "1");
    assert_eq!(table[2][col("112")], "1");
    assert_eq!(table[2][col("32")], "1");
    let total: usize = table[1..]
        .iter()
        .flat_map(|r| &r[1..])
        .map(|v| v.parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 4);

    let custom = ok(dir.path(), &["stats", "--manifest", "m.csv", "--edges", "40,112"]);
    assert!(custom.starts_with("class,40,112\n"), "{custom}");
    assert_eq!(code(dir.path(), &["stats", "--manifest", "m.csv", "--edges", ""]), 2);
    assert_eq!(code(dir.path(), &["stats", "--manifest", "missing.csv"]), 3);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "modle = \"stateful\"\n").unwrap();
    assert_eq!(code(dir.path(), &["train", "--config", "bad.toml"]), 2);
    assert_eq!(code(dir.path(), &["frobnicate"]), 2);
    assert_eq!(code(dir.path(), &["bench", "--reps", "1"]), 2);
    assert_eq!(code(dir.path(), &["gradcheck", "--precision", "single"]), 2);
}

#[test]
fn help_documents_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["train", "lr-range", "eval"] {
        let help = ok(dir.path(), &[sub, "--help"]);
        for key in [
            "model",
            "precision",
            "seed",
            "out_dir",
            "manifest",
            "split",
            "validation_fraction",
            "size",
            "max_depth",
            "main_widths",
            "support_widths",
            "decision_width",
            "padding",
            "dropout",
            "peephole",
            "epochs",
            "batch_size",
            "clip_len",
            "bin_edges",
            "weight_exponent",
            "carry_state",
            "schedule",
            "beta1",
        ] {
            assert!(help.contains(&format!("{key} =")), "{sub}: {key}");
        }
    }
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let table = ok(dir.path(), &["gradcheck", "--seeds", "2"]);
    assert!(table.contains("convlstm") && !table.contains("FAIL"), "{table}");
    assert_eq!(
        code(dir.path(), &["gradcheck", "--seeds", "1", "--tolerance", "1e-30"]),
        1
    );
}

fn log_values(path: &Path) -> Vec<Vec<f64>> {
    let table = rows(path);
    assert_eq!(
        table[0],
        [
            "epoch",
            "lr",
            "train_loss",
            "train_acc",
            "val_loss",
            "val_acc",
            "seconds"
        ]
    );
    table[1..]
        .iter()
        .map(|r| r[..6].iter().map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn train_resume_and_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data");
    for model in ["stateless", "stateful"] {
        let schedule = "schedule = { kind = \"cyclical\", min_lr = 1e-4, max_lr = 2e-3, half_cycle = 1.5 }\n";
        let cfg = write_config(dir.path(), model, &format!("epochs = 3\n{schedule}"));
        let cfg = cfg.to_str().unwrap();
        ok(dir.path(), &["--threads", "1", "train", "--config", cfg, "--quiet"]);
        let run = dir.path().join(format!("run-{model}"));
        let full = log_values(&run.join("log.csv"));
        assert_eq!(full.len(), 3);
        for f in ["best.clck", "last.clck", "config.toml"] {
            assert!(run.join(f).exists(), "{f}");
        }
        let echoed = std::fs::read_to_string(run.join("config.toml")).unwrap();
        assert!(
            echoed.contains("batch_size = 3") && echoed.contains("kind = \"cyclical\""),
            "{echoed}"
        );

        assert_eq!(code(dir.path(), &["train", "--config", cfg]), 2);
        ok(
            dir.path(),
            &[
                "--threads",
                "1",
                "train",
                "--config",
                cfg,
                "--force",
                "--epochs",
                "2",
                "--quiet",
            ],
        );
        assert_eq!(log_values(&run.join("log.csv")).len(), 2);
        ok(
            dir.path(),
            &[
                "--threads",
                "1",
                "train",
                "--config",
                cfg,
                "--resume",
                "--epochs",
                "3",
                "--quiet",
            ],
        );
        let resumed = log_values(&run.join("log.csv"));
        assert_eq!(resumed.len(), 3);
        for (a, b) in full.iter().flatten().zip(resumed.iter().flatten()) {
            assert!((a - b).abs() <= 1e-6, "{model}: {a} vs {b}");
        }

        let other = if model == "stateless" { "stateful" } else { "stateless" };
        let args = ["train", "--config", cfg, "--resume", "--model", other, "--quiet"];
        assert_eq!(code(dir.path(), &args), 2);
    }
}

#[test]
fn eval_and_bench_outputs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data");
    let cfg = write_config(
        dir.path(),
        "stateless",
        "epochs = 1\nschedule = { kind = \"constant\", lr = 1e-3 }\n",
    );
    ok(dir.path(), &["train", "--config", cfg.to_str().unwrap(), "--quiet"]);
    let ck = "run-stateless/best.clck";
    let summary = ok(dir.path(), &["eval", "--checkpoint", ck, "--split", "test"]);
    assert!(summary.starts_with("accuracy: "));
    let out = dir.path().join("run-stateless/eval-test");
    let per_class = rows(&out.join("per_class.csv"));
    assert_eq!(per_class[0], ["class", "support", "accuracy"]);
    // Classes without test videos have an empty accuracy cell.
    for r in per_class[1..].iter().filter(|r| !r[2].is_empty()) {
        let acc: f64 = r[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    let confusion = rows(&out.join("confusion.csv"));
    assert_eq!(confusion.len(), 4);
    let counted: usize = confusion[1..]
        .iter()
        .flat_map(|r| &r[1..])
        .map(|v| v.parse::<usize>().unwrap())
        .sum();
    assert_eq!(
        counted,
        per_class[1..].iter().map(|r| r[1].parse::<usize>().unwrap()).sum()
    );
    assert!(out.join("summary.txt").exists());
    assert_eq!(
        code(dir.path(), &["eval", "--checkpoint", ck, "--min-accuracy", "1.5"]),
        1
    );
    assert_eq!(code(dir.path(), &["eval", "--checkpoint", "missing.clck"]), 3);
    std::fs::write(dir.path().join("junk.clck"), b"CLCK\x09\x00").unwrap();
    assert_eq!(code(dir.path(), &["eval", "--checkpoint", "junk.clck"]), 3);

    let report = ok(
        dir.path(),
        &[
            "bench",
            "--checkpoint",
            ck,
            "--reps",
            "1",
            "--synthetic",
            "1",
            "--frames",
            "24",
            "--out",
            "bench.csv",
        ],
    );
    let table = rows(&dir.path().join("bench.csv"));
    assert_eq!(report.lines().count(), 2);
    assert_eq!(table[0], ["model", "mean_s", "p50_s", "p95_s", "fps", "samples"]);
    let vals: Vec<f64> = table[1][1..].iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(vals[4], 1.0);
    assert_eq!(vals[0], vals[1]);
    assert!((vals[3] - 24.0 / vals[0]).abs() <= 0.01 + 1e-3 * vals[3]);
}

#[test]
fn lr_range_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data");
    let cfg = write_config(dir.path(), "stateful", "");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(dir.path(), &["lr-range", "--config", cfg, "--iters", "9"]), 2);
    let path = ok(
        dir.path(),
        &["lr-range", "--config", cfg, "--iters", "12", "--end", "1e-2"],
    );
    let table = rows(Path::new(path.trim()));
    assert_eq!(table[0], ["iter", "lr", "smoothed_loss", "raw_loss"]);
    let lrs: Vec<f64> = table[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(lrs[0], 1e-7);
}
