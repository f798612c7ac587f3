use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn veinpipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_veinpipe"))
        .args(args)
        .env_remove("VEINPIPE_THREADS")
        .output()
        .expect("spawn veinpipe")
}

fn ok(args: &[&str]) -> Output {
    let out = veinpipe(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fails_with(args: &[&str], code: i32, needle: &str) {
    let out = veinpipe(args);
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {err}");
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic should be one line: {err}");
    assert!(err.contains(needle), "{err}");
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    fails_with(&["synth", "--count", "0", "--out", s(&out)], 2, "--count");
    assert!(!out.exists());
    let missing = dir.path().join("missing");
    let w = dir.path().join("w.veinw");
    fails_with(&["eval", "--data", s(&missing), "--weights", s(&w)], 2, "annotations.csv");
    fails_with(&["label-angles", "--masks", s(&missing), "--csv-out", s(&w)], 2, "not found");
    assert!(!w.exists());
}

#[test]
fn full_int_without_calibration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let w = dir.path().join("w.veinw");
    ok(&["synth", "--count", "12", "--out", s(&ds)]);
    ok(&["train", "--data", s(&ds), "--epochs", "1", "--out-weights", s(&w)]);
    let q = dir.path().join("q.veinw");
    fails_with(
        &["quantize", "--weights", s(&w), "--scheme", "full-int", "--out", s(&q)],
        2,
        "requires calibration data",
    );
    fails_with(
        &["quantize", "--weights", s(&w), "--scheme", "int4", "--out", s(&q)],
        2,
        "float16",
    );
    assert!(!q.exists());
}

#[test]
fn train_quantize_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let w = dir.path().join("w.veinw");
    let log = dir.path().join("log.json");
    ok(&["synth", "--count", "20", "--seed", "3", "--out", s(&ds)]);
    ok(&[
        "train", "--data", s(&ds), "--epochs", "2", "--out-weights", s(&w), "--log", s(&log), "--checkpoint-every", "1",
    ]);
    let epochs = json(&log)["epochs"].as_array().unwrap().len();
    assert_eq!(epochs, 2);
    assert!(dir.path().join("w.epoch1.veinw").exists());

    let f32_len = std::fs::metadata(&w).unwrap().len();
    for (tag, scheme) in ["float32", "dynamic-range", "float16", "full-int", "float-fallback"].iter().enumerate() {
        let q = dir.path().join(format!("{scheme}.veinw"));
        ok(&["quantize", "--weights", s(&w), "--scheme", scheme, "--calib", s(&ds), "--out", s(&q)]);
        let bytes = std::fs::read(&q).unwrap();
        assert_eq!(bytes[9] as usize, tag, "{scheme} scheme byte");
        if tag > 0 {
            assert!((bytes.len() as u64) < f32_len, "{scheme} should shrink");
        }
        let report = dir.path().join(format!("{scheme}.json"));
        ok(&["eval", "--data", s(&ds), "--weights", s(&q), "--split", "all", "--report", s(&report)]);
        let r = json(&report);
        for key in ["iou", "dice", "f1", "pixel_accuracy", "psnr_db", "mse", "mae"] {
            assert!(r.get(key).is_some(), "{scheme} report lacks {key}: {r}");
        }
        assert_eq!(r["iou"].as_f64().unwrap() <= r["dice"].as_f64().unwrap(), true);
    }

    // ground-truth masks scored against themselves
    let report = dir.path().join("gt.json");
    let gt = ds.join("masks_vein");
    ok(&["eval", "--data", s(&ds), "--pred-masks", s(&gt), "--split", "all", "--report", s(&report)]);
    assert_eq!(json(&report)["iou"].as_f64(), Some(1.0));

    let img = ds.join("images").join("synth_00000.png");
    let overlay = dir.path().join("full.png");
    ok(&[
        "infer", "--weights", s(&w), "--image", s(&img), "--overlay-out", s(&overlay), "--roi-frac-w", "1",
        "--roi-frac-h", "1",
    ]);
    let side = json(&overlay.with_extension("json"));
    assert_eq!(side["vein_pixels"], side["roi_vein_pixels"]);
    let angle = side["angle"].as_f64().unwrap();
    assert!((0.0..180.0).contains(&angle));

    let small = dir.path().join("small.png");
    let small_json = dir.path().join("small_side.json");
    ok(&[
        "infer", "--weights", s(&w), "--image", s(&img), "--overlay-out", s(&small), "--json-out", s(&small_json),
    ]);
    let side = json(&small_json);
    assert!(side["roi_vein_pixels"].as_u64() <= side["vein_pixels"].as_u64());
    assert!(small.exists());
}

#[test]
fn label_angles_is_repeatable_and_flags_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    ok(&["synth", "--count", "6", "--seed", "9", "--out", s(&ds)]);
    let masks = ds.join("masks_arm");
    std::fs::write(masks.join("zz_broken.png"), b"not a png").unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&["label-angles", "--masks", s(&masks), "--csv-out", s(&a)]);
    ok(&["label-angles", "--masks", s(&masks), "--csv-out", s(&b)]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());

    let truth: Vec<f64> = csv::Reader::from_path(ds.join("annotations.csv"))
        .unwrap()
        .records()
        .map(|r| r.unwrap()[7].parse().unwrap())
        .collect();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = rows.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 7);
    for (row, want) in rows.iter().zip(&truth) {
        assert_eq!(&row[2], "ok");
        let got: f64 = row[1].parse().unwrap();
        let d = (got - want).rem_euclid(180.0);
        assert!(d.min(180.0 - d) <= 3.0, "{}: {got} vs {want}", &row[0]);
    }
    assert_eq!(&rows[6][0], "zz_broken.png");
    assert_eq!(&rows[6][2], "error");
    assert!(!rows[6][3].is_empty());
}
