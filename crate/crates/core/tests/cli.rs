use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_glottisnet"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_image(path: &Path, w: u32, h: u32) {
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 5 % 256) as u8, (y * 3 % 256) as u8, ((x ^ y) % 256) as u8]))
        .save(path)
        .unwrap();
}

const SMALL_CONFIG: &str = r#"{"neck_channels": 8, "input_size": 64}"#;

/// Small seeded model plus its config file inside `dir`.
fn small_model(dir: &Path, extra: &[&str]) -> (PathBuf, PathBuf) {
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let weights = dir.join("w.bin");
    let mut args = vec!["init-weights", "--config", cfg.to_str().unwrap(), "--seed", "3", "--out", weights.to_str().unwrap()];
    args.extend_from_slice(extra);
    assert!(run(&args).status.success());
    (cfg, weights)
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["assign"]).status.code(), Some(1));
    let out = run(&["--threads", "0", "gradcheck", "--trials", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--threads"));
}

#[test]
fn missing_files_exit_two() {
    let out = run(&["assign", "--instances", "/nonexistent/instances.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error: "));
    let out = run(&["detect", "--model", "/nonexistent/w.bin", "--image", "/nonexistent/x.png"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn assign_single_pair() {
    let v = stdout_json(&run(&["assign", "--instances", fixture("assign_single.json").to_str().unwrap()]));
    assert_eq!(v["assignment"], serde_json::json!([0]));
    assert_eq!(v["num_foreground"], 1);
    assert_eq!(v["ground_truths"][0]["assigned"], serde_json::json!([0]));
    assert_eq!(v["ground_truths"][0]["fallback"], true);
    assert_eq!(v["config"]["top_k"], 7);
}

#[test]
fn assign_conflict_goes_to_cheaper_gt() {
    let v = stdout_json(&run(&["assign", "--instances", fixture("assign_conflict.json").to_str().unwrap()]));
    let costs = &v["costs"];
    assert!((costs[0][0].as_f64().unwrap() - 0.3).abs() < 1e-12);
    assert!((costs[0][1].as_f64().unwrap() - 0.5).abs() < 1e-12);
    // both GTs keep only prediction 0; GT 0 is cheaper, GT 1 takes its next candidate
    assert_eq!(v["ground_truths"][0]["retained"], serde_json::json!([0]));
    assert_eq!(v["ground_truths"][1]["retained"], serde_json::json!([0]));
    assert_eq!(v["assignment"], serde_json::json!([0, 1, null]));
    assert_eq!(v["num_background"], 1);
}

#[test]
fn assign_flags_override_file_config() {
    let path = fixture("assign_conflict.json");
    let v = stdout_json(&run(&["assign", "--instances", path.to_str().unwrap(), "--topk", "2", "--lambda", "0.25"]));
    assert_eq!(v["config"]["top_k"], 2);
    assert_eq!(v["config"]["lambda"], 0.25);
}

#[test]
fn assign_empty_predictions_is_all_background() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("report.json");
    let out = run(&["assign", "--instances", fixture("assign_empty.json").to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("background"));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(v["all_background"], true);
    assert_eq!(v["ground_truths"][0]["retained"], serde_json::json!([]));
}

#[test]
fn assign_malformed_names_line_and_field() {
    let out = run(&["assign", "--instances", fixture("assign_malformed.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("predictions[1].box"), "{msg}");
    assert!(msg.contains("line 4"), "{msg}");
}

#[test]
fn eval_three_image_fixture() {
    let gts = fixture("gt_three.json");
    let v = stdout_json(&run(&[
        "eval",
        "--gts",
        gts.to_str().unwrap(),
        "--dets",
        fixture("dets_three.json").to_str().unwrap(),
        "--json",
    ]));
    let close = |v: &Value, want: f64| (v.as_f64().unwrap() - want).abs() <= 1e-6;
    assert!(close(&v["map"], 346.0 / 1010.0), "{}", v["map"]);
    assert!(close(&v["ap50"], 57.0 / 101.0));
    assert!(close(&v["ap75"], 34.0 / 101.0));
    assert_eq!(v["per_class"][0]["num_gt"], 4);
}

#[test]
fn eval_perfect_and_empty() {
    let gts = fixture("gt_three.json");
    let gts = gts.to_str().unwrap();
    let perfect = stdout_json(&run(&["eval", "--gts", gts, "--dets", fixture("dets_perfect.json").to_str().unwrap(), "--json"]));
    for key in ["map", "ap50", "ap75"] {
        assert_eq!(perfect[key], 1.0);
    }
    let empty = stdout_json(&run(&["eval", "--gts", gts, "--dets", fixture("dets_empty.json").to_str().unwrap(), "--json"]));
    for key in ["map", "ap50", "ap75"] {
        assert_eq!(empty[key], 0.0);
    }
}

#[test]
fn eval_table_and_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let out = run(&[
        "eval",
        "--gts",
        fixture("gt_three.json").to_str().unwrap(),
        "--dets",
        fixture("dets_three.json").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("mAP") && table.contains("0.3426"), "{table}");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert!(v["map"].is_number());
}

#[test]
fn eval_orphan_ids_are_listed() {
    let out = run(&[
        "eval",
        "--gts",
        fixture("gt_three.json").to_str().unwrap(),
        "--dets",
        fixture("dets_orphan.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(msg.contains("{7, 9}"), "{msg}");
}

#[test]
fn gradcheck_ten_seeds_and_bad_eps() {
    let v = stdout_json(&run(&["gradcheck", "--seed", "11", "--trials", "10", "--json"]));
    assert_eq!(v["trials"], 10);
    assert_eq!(v["trials_passed"], 10);
    let out = run(&["gradcheck", "--eps", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("eps"));
}

#[test]
fn bench_reports_ordered_latencies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let v = stdout_json(&run(&["bench", "--config", cfg.to_str().unwrap(), "--iters", "3", "--warmup", "1", "--json"]));
    assert!(v["fps"].as_f64().unwrap() > 0.0);
    assert!(v["mean_ms"].as_f64().unwrap() <= v["max_ms"].as_f64().unwrap());
    assert!(v["median_ms"].as_f64().unwrap() <= v["p95_ms"].as_f64().unwrap());
    assert!(v["model_size_bytes"].as_u64().unwrap() > 0);
    assert_eq!(run(&["bench", "--config", cfg.to_str().unwrap(), "--iters", "0"]).status.code(), Some(1));
}

#[test]
fn detect_writes_in_bounds_detections() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, weights) = small_model(dir.path(), &[]);
    let image = dir.path().join("img.png");
    write_image(&image, 90, 70);
    let out_path = dir.path().join("dets.json");
    let args = [
        "detect",
        "--model",
        weights.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--image-id",
        "42",
        "--out",
        out_path.to_str().unwrap(),
    ];
    assert!(run(&args).status.success());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!((v["width"].as_u64(), v["height"].as_u64()), (Some(90), Some(70)));
    for d in v["detections"].as_array().unwrap() {
        assert_eq!(d["image_id"], 42);
        assert_eq!(d["category_id"], 1);
        let b: Vec<f64> = d["bbox"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert!(b.iter().all(|&x| x >= 0.0) && b[0] + b[2] <= 90.0 && b[1] + b[3] <= 70.0, "{b:?}");
    }
    // the config embedded in the weight file is used without --config
    let again = run(&args[..7]);
    assert!(again.status.success());
    let _ = cfg;
}

#[test]
fn detect_output_feeds_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (_, weights) = small_model(dir.path(), &[]);
    let image = dir.path().join("img.png");
    write_image(&image, 64, 64);
    let dets = dir.path().join("dets.json");
    let out = run(&[
        "detect",
        "--model",
        weights.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--image-id",
        "1",
        "--out",
        dets.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let v = stdout_json(&run(&["eval", "--gts", fixture("gt_three.json").to_str().unwrap(), "--dets", dets.to_str().unwrap(), "--json"]));
    let map = v["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
}

#[test]
fn corrupt_weights_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.bin");
    std::fs::write(&weights, b"MGNETW01\xff\xff\xff\xff\xff\xff\xff\xff").unwrap();
    let image = dir.path().join("img.png");
    write_image(&image, 8, 8);
    let out = run(&["detect", "--model", weights.to_str().unwrap(), "--image", image.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inspect_zero_offsets_give_black_maps_at_level_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, weights) = small_model(dir.path(), &[]);
    let image = dir.path().join("img.ppm");
    write_image(&image, 50, 40);
    let out_dir = dir.path().join("maps");
    let args = ["inspect", "--model", weights.to_str().unwrap(), "--image", image.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()];
    assert!(run(&args).status.success());
    let first: Vec<Vec<u8>> = (0..3).map(|l| std::fs::read(out_dir.join(format!("offsets_l{l}.pgm"))).unwrap()).collect();
    for (l, bytes) in first.iter().enumerate() {
        let side = 64 / (8 << l);
        let header = format!("P5\n{side} {side} 255\n");
        assert!(bytes.starts_with(header.as_bytes()), "level {l}: {:?}", &bytes[..16.min(bytes.len())]);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), header.len() + side * side);
    }
    assert!(run(&args).status.success());
    for (l, bytes) in first.iter().enumerate() {
        assert_eq!(&std::fs::read(out_dir.join(format!("offsets_l{l}.pgm"))).unwrap(), bytes);
    }
}

#[test]
fn inspect_nonzero_offsets_use_full_range() {
    let dir = tempfile::tempdir().unwrap();
    let (_, weights) = small_model(dir.path(), &["--phi-range", "0.5"]);
    let image = dir.path().join("img.png");
    write_image(&image, 64, 64);
    let out_dir = dir.path().join("maps");
    let out = run(&["inspect", "--model", weights.to_str().unwrap(), "--image", image.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let bytes = std::fs::read(out_dir.join("offsets_l0.pgm")).unwrap();
    let pixels = &bytes[bytes.len() - 64..];
    assert_eq!(pixels.iter().max(), Some(&255));
    assert_eq!(pixels.iter().min(), Some(&0));
}
