use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.conf");

fn ctnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctnet"))
        .args(args)
        .env("CTNET_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ctnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_every_file_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for dir in [&a, &b] {
        ok(&[
            "synth",
            "--classes",
            "8",
            "--per-class",
            "100",
            "--size",
            "12x12",
            "--seed",
            "4",
            "--out",
            s(dir),
        ]);
    }
    let files = files_in(&a);
    assert_eq!(files.len(), 801);
    assert_eq!(
        files.iter().filter(|(n, _)| n.ends_with(".ppm")).count(),
        800
    );
    let manifest = std::fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().next(), Some("path,class_id,split"));
    assert_eq!(manifest.lines().count(), 801);
    assert_eq!(files, files_in(&b));
}

#[test]
fn usage_errors_exit_with_one() {
    let t = tempfile::tempdir().unwrap();
    let out = ctnet(&[
        "synth",
        "--classes",
        "1",
        "--per-class",
        "10",
        "--out",
        s(t.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!t.path().join("manifest.csv").exists());
    assert_eq!(ctnet(&["pairs", "--nonsense"]).status.code(), Some(1));
    assert_eq!(
        ctnet(&["gradcheck", "--trials", "0"]).status.code(),
        Some(1)
    );
}

#[test]
fn missing_config_key_is_named() {
    let t = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(CONFIG).unwrap();
    let without: String = text
        .lines()
        .filter(|l| !l.starts_with("mu2"))
        .map(|l| format!("{l}\n"))
        .collect();
    let cfg = t.path().join("bad.conf");
    std::fs::write(&cfg, without).unwrap();
    ok(&[
        "synth",
        "--classes",
        "2",
        "--per-class",
        "5",
        "--size",
        "8",
        "--out",
        s(&t.path().join("d")),
    ]);
    let out = ctnet(&[
        "train",
        "--data",
        s(&t.path().join("d")),
        "--config",
        s(&cfg),
        "--out",
        s(&t.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mu2"));
    assert!(
        !t.path().join("r").exists(),
        "no work before flags are validated"
    );
}

#[test]
fn one_epoch_smoke_run_then_eval() {
    let t = tempfile::tempdir().unwrap();
    let (data, run, ev) = (
        t.path().join("d"),
        t.path().join("run"),
        t.path().join("ev"),
    );
    ok(&[
        "synth",
        "--classes",
        "4",
        "--per-class",
        "200",
        "--size",
        "32x32",
        "--seed",
        "1",
        "--out",
        s(&data),
    ]);
    let start = Instant::now();
    ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        CONFIG,
        "--out",
        s(&run),
        "--epochs",
        "1",
    ]);
    assert!(
        start.elapsed() < Duration::from_secs(60),
        "smoke run took {:?}",
        start.elapsed()
    );
    for f in [
        "epoch_001.ckpt",
        "latest.ckpt",
        "history.csv",
        "config.conf",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(
        std::fs::read_to_string(run.join("history.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    ok(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&run),
        "--out",
        s(&ev),
    ]);
    let mut expected: Vec<String> = [
        "report.csv",
        "confusion.csv",
        "pairs.csv",
        "roc.svg",
        "confusion.svg",
        "history.svg",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    expected.extend((0..4).map(|c| format!("roc_class_{c:02}.csv")));
    for f in &expected {
        assert!(ev.join(f).exists(), "{f}");
    }
    let report = std::fs::read_to_string(ev.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 4 + 1);
    assert!(report.lines().last().unwrap().starts_with("Average,"));

    // Rerunning with the same flags overwrites with identical content.
    let first = files_in(&ev);
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&run),
        "--out",
        s(&ev),
    ]);
    assert_eq!(files_in(&ev), first);
}

#[test]
fn resumed_run_follows_the_uninterrupted_trajectory() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    ok(&[
        "synth",
        "--classes",
        "4",
        "--per-class",
        "20",
        "--size",
        "16",
        "--seed",
        "2",
        "--out",
        s(&data),
    ]);
    let common = [
        "--config",
        CONFIG,
        "--set",
        "image_size=16x16",
        "--set",
        "phase1_epochs=1",
        "--set",
        "steps_per_epoch=3",
    ];
    let train = |out: &Path, epochs: &str, resume: bool| {
        let mut args = vec!["train", "--data", s(&data), "--out", s(out), "--set"];
        let e = format!("epochs={epochs}");
        args.push(&e);
        args.extend(common);
        if resume {
            args.push("--resume");
        }
        ok(&args);
    };
    let (full, split) = (t.path().join("full"), t.path().join("split"));
    train(&full, "3", false);
    train(&split, "2", false);
    train(&split, "3", true);
    for f in ["latest.ckpt", "epoch_003.ckpt", "history.csv"] {
        assert_eq!(
            std::fs::read(full.join(f)).unwrap(),
            std::fs::read(split.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn gradcheck_reports_every_case() {
    let out = ok(&["gradcheck", "--trials", "2"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for name in [
        "conv2d",
        "bilinear_pool",
        "constrained_triplet_loss",
        "weighted_softmax_loss",
        "joint_loss",
        "network_joint_loss",
    ] {
        assert!(
            text.lines()
                .any(|l| l.starts_with(name) && l.ends_with("ok")),
            "{name}"
        );
    }
}
