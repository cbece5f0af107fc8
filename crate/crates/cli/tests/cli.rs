use std::path::Path;
use std::process::{Command, Output};

use hsvr_cli::checkpoint::Checkpoint;
use hsvr_cli::commands::model_report;
use hsvr_core::compress::retained_energy;
use hsvr_core::lti::RotationSsm;
use hsvr_core::net::{init_model, SsmLayer, TrainConfig};

fn hsvr(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsvr"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--p",
    "8",
    "--epochs",
    "2",
    "--train-samples",
    "64",
    "--eval-samples",
    "32",
    "--synthetic-len",
    "16",
];

fn train_small(dir: &Path, n: &str, extra: &[&str]) {
    let mut args = vec!["train", "--n", n];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let o = hsvr(dir, &args);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn read_csv(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn train_writes_checkpoint_metrics_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path(), "8", &["--reg", "1e-3"]);
    for name in ["model.ckpt", "model.ckpt.json", "metrics.csv", "hsv_snapshots.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let metrics = read_csv(&dir.path().join("metrics.csv"));
    assert_eq!(metrics.len(), 2);
    let header = csv::Reader::from_path(dir.path().join("metrics.csv"))
        .unwrap()
        .headers()
        .unwrap()
        .clone();
    assert_eq!(
        header.iter().collect::<Vec<_>>(),
        ["epoch", "train_loss", "ce", "reg", "eval_acc", "wall_time_s"]
    );
    let ck = Checkpoint::load(&dir.path().join("model.ckpt")).unwrap();
    assert_eq!(ck.epoch, 2);
    assert!(ck.optimizer.is_some() && ck.rng.is_some());
}

#[test]
fn invalid_depth_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hsvr(dir.path(), &["train", "--depth", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("depth"), "{}", stderr(&o));
    assert!(!dir.path().join("model.ckpt").exists());
}

#[test]
fn compress_requires_exactly_one_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("model.ckpt");
    let ck = ck.to_str().unwrap();
    let both = hsvr(
        dir.path(),
        &["compress", "--checkpoint", ck, "--energy", "0.9", "--budget", "3"],
    );
    assert_eq!(both.status.code(), Some(2));
    let none = hsvr(dir.path(), &["compress", "--checkpoint", ck]);
    assert_eq!(none.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hsvr(dir.path(), &["hsv-report", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn hsv_report_matches_in_process_values() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path(), "8", &[]);
    let ck = dir.path().join("model.ckpt");
    let o = hsvr(
        dir.path(),
        &["hsv-report", "--checkpoint", ck.to_str().unwrap(), "--svg"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("hsv.svg").exists());
    let report = model_report(&Checkpoint::load(&ck).unwrap().model).unwrap();
    let rows = read_csv(&dir.path().join("hsv.csv"));
    assert_eq!(rows.len(), report.sigmas.iter().map(Vec::len).sum::<usize>());
    for row in rows {
        let layer: usize = row[0].parse().unwrap();
        let index: usize = row[1].parse().unwrap();
        let sigma: f64 = row[2].parse().unwrap();
        let expected = report.sigmas[layer][index - 1];
        assert!(
            (sigma - expected).abs() <= 1e-12 * expected.max(1e-300),
            "{sigma} vs {expected}"
        );
    }
}

#[test]
fn silent_layer_reports_zero_singular_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        depth: 1,
        n: 4,
        p: 3,
        classes: 2,
        ..TrainConfig::default()
    };
    let mut model = init_model(&cfg, 1).unwrap();
    let SsmLayer::Rotation(layer) = &mut model.blocks[0].ssm else {
        unreachable!()
    };
    *layer = RotationSsm {
        c: layer.c.map(|_| 0.0),
        ..layer.clone()
    };
    let ck = dir.path().join("silent.ckpt");
    Checkpoint::new(model).save(&ck).unwrap();
    let o = hsvr(dir.path(), &["hsv-report", "--checkpoint", ck.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_csv(&dir.path().join("hsv.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() == 0.0));
}

#[test]
fn compress_certificates_follow_the_criterion() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path(), "32", &[]);
    let ck = dir.path().join("model.ckpt");
    let report = model_report(&Checkpoint::load(&ck).unwrap().model).unwrap();
    let ck = ck.to_str().unwrap();

    let o = hsvr(dir.path(), &["compress", "--checkpoint", ck, "--trunc-ratio", "0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let small = Checkpoint::load(&dir.path().join("compressed.ckpt")).unwrap().model;
    let orders: Vec<usize> = small.blocks.iter().map(|b| b.ssm.order()).collect();
    assert!(
        orders.iter().sum::<usize>() as f64 / orders.len() as f64 <= 16.0,
        "{orders:?}"
    );
    for row in read_csv(&dir.path().join("certificate.csv")) {
        let (layer, r): (usize, usize) = (row[0].parse().unwrap(), row[1].parse().unwrap());
        let tail: f64 = row[2].parse().unwrap();
        let bound: f64 = row[3].parse().unwrap();
        assert!((tail - report.tail(layer, r)).abs() <= 1e-12 * report.energies[layer]);
        assert_eq!(bound, 2.0 * tail);
    }

    let o = hsvr(
        dir.path(),
        &["compress", "--checkpoint", ck, "--energy", "0.99", "--diagonalize"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for row in read_csv(&dir.path().join("certificate.csv")) {
        let (layer, r): (usize, usize) = (row[0].parse().unwrap(), row[1].parse().unwrap());
        assert!(retained_energy(&report.sigmas[layer], r) >= 0.99);
    }
    let small = Checkpoint::load(&dir.path().join("compressed.ckpt")).unwrap().model;
    assert!(small.blocks.iter().all(|b| b.ssm.mode_name() == "diagonal_complex"));

    let o = hsvr(
        dir.path(),
        &[
            "evaluate",
            "--checkpoint",
            dir.path().join("compressed.ckpt").to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("accuracy "), "{stdout}");
}

#[test]
fn bench_lyap_writes_its_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = hsvr(
        dir.path(),
        &[
            "bench-lyap",
            "--sizes",
            "8,16,64",
            "--solvers",
            "block,naive",
            "--runs",
            "2",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_csv(&dir.path().join("bench_lyap.csv"));
    // the naive solver is skipped above its size limit
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() > 0.0 && &r[3] == "2"));
}

#[test]
fn bench_scan_writes_its_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = hsvr(
        dir.path(),
        &[
            "bench-scan",
            "--n",
            "8",
            "--len",
            "128",
            "--workers",
            "1,2",
            "--runs",
            "2",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_csv(&dir.path().join("bench_scan.csv"));
    assert!(rows.len() >= 2);
}
