//! End-to-end runs of the `planepose` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_planepose");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path, test_volume: &Path) -> String {
    let text = format!(
        "method = qaerts\n\
         epochs = 2\n\
         batch_size = 4\n\
         batches_per_volume = 1\n\
         mean_warmup = 1\n\
         val_slices = 4\n\
         input_size = 16\n\
         channels = 4, 8\n\
         convs_per_block = 1\n\
         fc_hidden = 16\n\
         embedding_dim = 8\n\
         half_extent = 24\n\
         slice_resolution = 16\n\
         phantom_dims = 48, 48, 48\n\
         train_phantoms = 1, 2\n\
         val_phantoms = 3\n\
         test_volumes = {}\n\
         trans_z = -8, 12\n\
         n_per_volume = 3\n\
         metric_resolution = 16\n",
        test_volume.display()
    );
    let path = dir.join("tiny.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let volume = dir.join("test.vol");
    let cfg = tiny_config(dir, &volume);
    let s = |p: &Path| p.to_str().unwrap().to_owned();

    ok(&[
        "generate-volume",
        "--config",
        &cfg,
        "--seed",
        "4",
        "--dims",
        "48,48,48",
        "--out",
        &s(&volume),
    ]);
    assert!(volume.is_file());

    let slices = dir.join("slices");
    ok(&[
        "sample-slices",
        "--config",
        &cfg,
        "--volume",
        &s(&volume),
        "--n",
        "3",
        "--out-dir",
        &s(&slices),
    ]);
    for i in 0..3 {
        assert!(slices.join(format!("slice_{i:04}.pgm")).is_file());
        let sidecar = fs::read_to_string(slices.join(format!("slice_{i:04}.json"))).unwrap();
        let json: serde_json::Value = serde_json::from_str(&sidecar).unwrap();
        assert!(json["pose"]["c"].is_array());
    }

    let ckpt = dir.join("ckpt");
    ok(&["train", "--config", &cfg, "--out", &s(&ckpt)]);
    assert!(ckpt.is_dir());

    let summary = ok(&["evaluate", "--config", &cfg, "--checkpoint", &s(&ckpt)]);
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0],
        "method,ED,ED_norm,PA,MSE,NCC,SSIM,mean_var,params"
    );
    assert!(lines[1].starts_with("qaerts,"));

    let per_slice = dir.join("per_slice.csv");
    ok(&[
        "evaluate",
        "--config",
        &cfg,
        "--ground-truth",
        "--checkpoint",
        &s(&ckpt),
        "--per-slice",
        &s(&per_slice),
    ]);
    // One header plus three slices for each of the two reports.
    assert_eq!(fs::read_to_string(&per_slice).unwrap().lines().count(), 7);

    let pgm = slices.join("slice_0000.pgm");
    let preds = ok(&["predict", "--checkpoint", &s(&ckpt), &s(&pgm), &s(&pgm)]);
    let json: serde_json::Value = serde_json::from_str(&preds).unwrap();
    let records = json.as_array().unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0], records[1]);
    assert_eq!(records[0]["pose"].as_array().map(Vec::len), Some(9));
    assert_eq!(records[0]["heads"].as_array().map(Vec::len), Some(5));

    let empty = ok(&["predict", "--checkpoint", &s(&ckpt)]);
    assert_eq!(empty.trim(), "[]");
}

#[test]
fn bad_config_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 2\nno_such_key = 1\n").unwrap();
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "predict",
        "--checkpoint",
        tmp.path().join("absent").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}
