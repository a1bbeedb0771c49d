use std::path::Path;
use std::process::{Command, Output};

use mbrx::channel::{exp_decay_matrix, write_channel_trace};
use mbrx::harness::{aggregate, read_records, CSV_COLUMNS};

fn mbrx(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbrx"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

const BASE: &str = "\
users = 2
antennas = 2
constellation = qpsk
pilots = 100
info = 200
q_detector = 1
detector_steps = 40
";

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let unknown = write(d, "bad.cfg", "colour = blue\n");
    assert_eq!(mbrx(d, &["run", &unknown]).status.code(), Some(2));
    let zero = write(d, "zero.cfg", "pilots = 0\n");
    assert_eq!(mbrx(d, &["run", &zero]).status.code(), Some(2));
    let missing = d.join("absent.cfg");
    assert_eq!(mbrx(d, &["run", missing.to_str().unwrap()]).status.code(), Some(4));
    let no_trace = write(d, "trace.cfg", "channel = trace:nowhere.txt\n");
    assert_eq!(mbrx(d, &["run", &no_trace]).status.code(), Some(4));
    let ok = write(d, "ok.cfg", &format!("{BASE}blocks = 1\nsnr_db = 10\n"));
    let out = mbrx(d, &["run", &ok]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_writes_schema_and_seed_changes_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "a.cfg", &format!("{BASE}blocks = 2\nsnr_db = 8, 12\n"));
    assert!(mbrx(d, &["run", &cfg]).status.success());
    let text = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    let first = read_records(&d.join("metrics.csv")).unwrap();
    assert_eq!(first.len(), 4);
    assert!(first.iter().all(|r| r.ber.is_none() && r.decoder_mode == "none"));

    let other = tempfile::tempdir().unwrap();
    assert!(mbrx(other.path(), &["--seed", "9", "run", &cfg]).status.success());
    let second = read_records(&other.path().join("metrics.csv")).unwrap();
    assert_ne!(first[0].fingerprint, second[0].fingerprint);
}

#[test]
fn trace_channel_defaults_to_trace_length() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mats: Vec<_> = (0..10).map(|_| exp_decay_matrix(2, 2)).collect();
    write_channel_trace(&d.join("h.txt"), &mats).unwrap();
    let cfg = write(d, "t.cfg", &format!("{BASE}channel = trace:h.txt\nsnr_db = 10\n"));
    assert!(mbrx(d, &["run", &cfg]).status.success());
    let records = read_records(&d.join("metrics.csv")).unwrap();
    assert_eq!(records.len(), 10);
    assert_eq!(records.iter().map(|r| r.block).collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
}

#[test]
fn sweep_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "s1.cfg", &format!("{BASE}blocks = 2\nsnr_db = 6, 8, 10\ndetector_mode = F\n"));
    write(d, "s2.cfg", &format!("{BASE}blocks = 2\nsnr_db = 6, 8, 10\ndetector_mode = MB\n"));
    let pattern = d.join("s*.cfg");
    let out = mbrx(d, &["sweep", pattern.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let raw = read_records(&d.join("sweep.csv")).unwrap();
    assert_eq!(raw.len(), 12);
    let summary = std::fs::read_to_string(d.join("sweep_summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 7);
    // hand-average the first group from the raw rows
    let group: Vec<_> = raw.iter().filter(|r| r.fingerprint == raw[0].fingerprint && r.snr_db == raw[0].snr_db).collect();
    let mean = group.iter().map(|r| r.ser).sum::<f64>() / group.len() as f64;
    assert!((aggregate(&raw)[0].ser - mean).abs() < 1e-15);
    assert!(lines[1].contains(",F,none,1,,2,"));

    let spec = write(d, "p.plot", "y = ser, ece\n");
    let out = mbrx(d, &["plot", d.join("sweep.csv").to_str().unwrap(), &spec]);
    assert!(out.status.success());
    let svg = std::fs::read_to_string(d.join("sweep_ser.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains(">MB<"));
    assert!(d.join("sweep_ece.svg").exists());

    let bad = write(d, "bad.plot", "y = latency\n");
    assert_eq!(mbrx(d, &["plot", d.join("sweep.csv").to_str().unwrap(), &bad]).status.code(), Some(2));
    assert_eq!(mbrx(d, &["sweep", d.join("none*.cfg").to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn decoder_training_is_a_separate_step() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(
        d,
        "c.cfg",
        &format!("{BASE}blocks = 1\nsnr_db = 10\ncode = hamming74\ndecoder_mode = F\ndecoder_steps = 20\ndecoder_train_frames = 40\n"),
    );
    let out = mbrx(d, &["train-decoder", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let path = String::from_utf8(out.stdout).unwrap();
    let text = std::fs::read_to_string(path.trim()).unwrap();
    assert!(text.starts_with("F\n"));
    assert!(mbrx(d, &["run", &cfg]).status.success());
    let r = read_records(&d.join("metrics.csv")).unwrap();
    assert!(r[0].ber.is_some_and(|b| (0.0..=1.0).contains(&b)));

    // a corrupted decoder file is a parse error
    std::fs::write(path.trim(), "F\nnot numbers\n").unwrap();
    assert_eq!(mbrx(d, &["run", &cfg]).status.code(), Some(2));
}

#[test]
fn oracle_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "o.cfg", &format!("{BASE}blocks = 1\nsnr_db = 30\ncode = hamming74\ndecoder_mode = plainBP\n"));
    assert!(mbrx(d, &["oracle", &cfg]).status.success());
    let r = read_records(&d.join("oracle.csv")).unwrap();
    assert_eq!((r[0].detector_mode.as_str(), r[0].decoder_mode.as_str()), ("MAP", "ML"));
    assert_eq!(r[0].ser, 0.0);
    assert_eq!(r[0].ber, Some(0.0));
}
