use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use medlitenet::data::{load_image_ppm, load_mask_pgm, synth_sample, Difficulty};
use medlitenet::metrics::confusion_metrics;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medlitenet")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

const MICRO_RUN: &str = "[model]\npreset = \"micro\"\n[train]\nepochs = 5\n[data]\nn_train = 8\nn_val = 4\nn_test = 4\n";

fn train_micro(dir: &Path, name: &str) -> PathBuf {
    let cfg = dir.join("micro.toml");
    std::fs::write(&cfg, MICRO_RUN).unwrap();
    let out = dir.join(name);
    let o = bin(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn synth_is_byte_identical_and_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = bin(&["synth", "--count", "10", "--seed", "7", "--out", s(d)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(stdout(&o).lines().count(), 10);
    }
    let (fa, fb) = (read_dir_sorted(&a), read_dir_sorted(&b));
    assert_eq!(fa.len(), 20);
    assert_eq!(fa, fb);
    assert!(fa.iter().any(|(n, _)| n == "sample_00009_mask.pgm"));
    let image = load_image_ppm(&a.join("sample_00000.ppm")).unwrap();
    let mask = load_mask_pgm(&a.join("sample_00000_mask.pgm")).unwrap();
    assert_eq!(image.shape(), &[3, 64, 64]);
    assert_eq!(mask.shape(), &[1, 64, 64]);
    let first = stdout(&bin(&["synth", "--count", "1", "--seed", "7", "--out", s(&dir.path().join("c"))]));
    let difficulty = first.split("difficulty=").nth(1).unwrap().trim();
    let d = Difficulty::ALL.into_iter().find(|d| d.name() == difficulty).unwrap();
    assert_eq!(mask, synth_sample(7, 64, d).unwrap().mask);
}

#[test]
fn synth_rejects_bad_size_and_unwritable_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["synth", "--size", "100", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("multiple of 32"), "{}", stderr(&o));
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let o = bin(&["synth", "--out", s(&blocker.join("sub"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_micro(dir.path(), "a");
    let b = train_micro(dir.path(), "b");
    for f in ["best.ckpt", "last.ckpt", "metrics.csv", "config.resolved.toml"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,split,loss,dice,iou,lr"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows.iter().filter(|r| r.contains(",train,")).count(), 5);
    assert_eq!(csv, std::fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("last.ckpt")).unwrap(), std::fs::read(b.join("last.ckpt")).unwrap());

    // The echo file resolves back to the same run.
    let echo = a.join("config.resolved.toml");
    let c = bin(&["train", "--config", s(&echo), "--out", s(&dir.path().join("c"))]);
    assert_eq!(code(&c), 0, "{}", stderr(&c));
    assert_eq!(csv, std::fs::read_to_string(dir.path().join("c/metrics.csv")).unwrap());
}

#[test]
fn train_error_paths() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = bin(&["train", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.learning_rate"), "{}", stderr(&o));

    std::fs::write(&bad, "[model]\nwidths = [8, 16, 24]\n").unwrap();
    let o = bin(&["train", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = bin(&["train", "--preset", "micro", "--dataset", s(&dir.path().join("nope")), "--out", s(&dir.path().join("y"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("does not exist"), "{}", stderr(&o));

    let cfg = dir.path().join("micro.toml");
    std::fs::write(&cfg, MICRO_RUN).unwrap();
    let o = bin(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("z")), "--inject-fault", "nan-loss"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("step 0"), "{}", stderr(&o));
}

#[test]
fn train_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("micro.toml");
    std::fs::write(&cfg, MICRO_RUN).unwrap();
    let out = dir.path().join("run");
    let o = bin(&["train", "--config", s(&cfg), "--out", s(&out), "--epochs", "2", "--seed", "9"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo = std::fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(echo.contains("epochs = 2"), "{echo}");
    assert!(echo.contains("seed = 9"), "{echo}");
    assert_eq!(std::fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 5);
}

#[test]
fn train_on_a_dataset_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&bin(&["synth", "--count", "6", "--out", s(&data)])), 0);
    let cfg = dir.path().join("micro.toml");
    std::fs::write(&cfg, "[model]\npreset = \"micro\"\n[train]\nepochs = 1\n[data]\nn_val = 2\n").unwrap();
    let o = bin(&["train", "--config", s(&cfg), "--dataset", s(&data), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("on 4 samples, validating on 2"), "{}", stdout(&o));
}

#[test]
fn infer_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_micro(dir.path(), "run");
    let ckpt = run.join("best.ckpt");
    let data = dir.path().join("data");
    assert_eq!(code(&bin(&["synth", "--count", "3", "--seed", "50", "--out", s(&data)])), 0);

    let pred = dir.path().join("pred");
    let o = bin(&["infer", "--ckpt", s(&ckpt), "--input", s(&data), "--out", s(&pred), "--prob"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with(" ms")).count(), 3);
    for i in 0..3 {
        let bytes = std::fs::read(pred.join(format!("sample_{i:05}_pred.pgm"))).unwrap();
        let raster = &bytes[bytes.len() - 64 * 64..];
        assert!(raster.iter().all(|&b| b == 0 || b == 255));
        assert!(pred.join(format!("sample_{i:05}_prob.pgm")).is_file());
    }

    // Per-image rows against an oracle computed from the files, and the
    // aggregate against the hand-averaged column.
    let o = bin(&["eval", "--pred-dir", s(&pred), "--gt-dir", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<Vec<&str>> = text.lines().skip(1).filter(|l| l.starts_with("sample_")).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    let mut dices = Vec::new();
    for r in &rows {
        let p = load_mask_pgm(&pred.join(format!("{}_pred.pgm", r[0]))).unwrap();
        let g = load_mask_pgm(&data.join(format!("{}_mask.pgm", r[0]))).unwrap();
        let m = confusion_metrics(p.data(), g.data()).unwrap();
        let d: f64 = r[1].parse().unwrap();
        assert!((d - m.dice).abs() < 1e-6);
        dices.push(d);
    }
    let mean = dices.iter().sum::<f64>() / 3.0;
    let agg = text.lines().last().unwrap();
    assert!(agg.starts_with("aggregate over 3 images: dice "), "{agg}");
    let reported: f64 = agg.split("dice ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!((reported - mean).abs() < 1e-4, "{reported} vs {mean}");

    // Ground truth scored against itself.
    let o = bin(&["eval", "--pred-dir", s(&data), "--gt-dir", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("dice 1.0000 ± 0.0000, iou 1.0000 ± 0.0000"), "{}", stdout(&o));

    // A one-member ensemble is plain checkpoint evaluation.
    let plain = bin(&["eval", "--ckpt", s(&ckpt), "--dataset", s(&data)]);
    let single = bin(&["eval", "--ensemble", s(&ckpt), "--dataset", s(&data)]);
    assert_eq!(code(&plain), 0, "{}", stderr(&plain));
    assert_eq!(stdout(&plain), stdout(&single));
    let pair = bin(&["eval", "--ensemble", &format!("{},{}", s(&ckpt), s(&run.join("last.ckpt"))), "--dataset", s(&data)]);
    assert_eq!(code(&pair), 0, "{}", stderr(&pair));

    // Unmatched files are listed.
    std::fs::copy(data.join("sample_00000_mask.pgm"), data.join("extra_mask.pgm")).unwrap();
    let o = bin(&["eval", "--pred-dir", s(&pred), "--gt-dir", s(&data)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("ground truth extra"), "{}", stderr(&o));
}

#[test]
fn infer_error_paths() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_micro(dir.path(), "run");
    let ckpt = run.join("best.ckpt");
    let data = dir.path().join("data");
    assert_eq!(code(&bin(&["synth", "--count", "1", "--out", s(&data)])), 0);
    let out = dir.path().join("pred");

    let o = bin(&["infer", "--ckpt", s(&ckpt), "--input", s(&data), "--out", s(&out), "--threshold", "1.1"]);
    assert_eq!(code(&o), 2);

    let small = dir.path().join("small.toml");
    std::fs::write(&small, "[model]\npreset = \"small\"\n").unwrap();
    let o = bin(&["infer", "--ckpt", s(&ckpt), "--input", s(&data), "--out", s(&out), "--config", s(&small)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let matching = dir.path().join("match.toml");
    std::fs::write(&matching, "[model]\npreset = \"micro\"\n").unwrap();
    let o = bin(&["infer", "--ckpt", s(&ckpt), "--input", s(&data), "--out", s(&out), "--config", s(&matching), "--tta"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = bin(&["infer", "--ckpt", s(&dir.path().join("missing.ckpt")), "--input", s(&data), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_scopes_and_fault_hook() {
    let o = bin(&["gradcheck", "--scope", "ops"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("all checks passed"));
    let o = bin(&["gradcheck", "--scope", "ops", "--inject-fault", "corrupt-grad"]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("FAIL"));
    assert_eq!(code(&bin(&["gradcheck", "--scope", "ops", "--tol", "-1"])), 2);
}

#[test]
fn params_budget_and_width_monotonicity() {
    let total = |args: &[&str]| -> usize {
        let o = bin(args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let out = stdout(&o);
        let line = out.lines().find(|l| l.starts_with("total")).unwrap();
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    let full = total(&["params"]);
    assert!((2_500_000..=4_000_000).contains(&full), "{full}");
    assert!(total(&["params", "--width-multiplier", "0.5"]) < full);
}

#[test]
fn every_subcommand_help_lists_defaults() {
    for cmd in ["synth", "train", "infer", "eval", "gradcheck", "params"] {
        let o = bin(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        let usage = text.lines().find(|l| l.starts_with("Usage:")).unwrap();
        // One block per flag: its line plus any continuation lines.
        let mut blocks: Vec<String> = Vec::new();
        for line in text.lines().skip_while(|l| !l.starts_with("Options:")).skip(1) {
            let t = line.trim_start();
            if t.starts_with('-') {
                blocks.push(t.to_string());
            } else if let Some(last) = blocks.last_mut() {
                last.push(' ');
                last.push_str(t);
            }
        }
        let flags: Vec<&String> = blocks.iter().filter(|b| !b.starts_with("-h, --help")).collect();
        assert!(!flags.is_empty(), "{cmd}");
        for f in flags {
            let name = f.split_whitespace().next().unwrap();
            assert!(f.contains("[default:") || usage.contains(name), "{cmd}: {f}");
        }
    }
    assert_eq!(code(&bin(&["no-such-command"])), 2);
}
