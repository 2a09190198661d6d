use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sdsrcnn::config::RunConfig;
use sdsrcnn::dataio::{write_detections, write_manifest, DetectionRecord, ManifestRecord};
use sdsrcnn::geometry::BBox;
use sdsrcnn::supervision::Annotation;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sdsrcnn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn repo_configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn ped(x: f64, y: f64, h: f64) -> Annotation {
    Annotation::unoccluded(BBox::new(x, y, 0.41 * h, h).unwrap())
}

fn det(image: &str, b: BBox, s: f64) -> DetectionRecord {
    DetectionRecord {
        image_id: image.into(),
        x: b.x,
        y: b.y,
        w: b.w,
        h: b.h,
        fused_score: s,
        rpn_score: s,
        bcn_score: None,
    }
}

/// The four-image miss-rate fixture, as files.
fn write_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let (a, b, c, d, e) = (ped(10.0, 10.0, 100.0), ped(200.0, 10.0, 80.0), ped(300.0, 50.0, 90.0), ped(50.0, 50.0, 120.0), ped(400.0, 10.0, 40.0));
    let far = |x| BBox::new(x, 500.0, 30.0, 70.0).unwrap();
    let manifest = dir.join("manifest.jsonl");
    write_manifest(
        &[
            ManifestRecord::new("0.pgm", 960, 720, &[a]),
            ManifestRecord::new("1.pgm", 960, 720, &[b, c]),
            ManifestRecord::new("2.pgm", 960, 720, &[d, e]),
            ManifestRecord::new("3.pgm", 960, 720, &[]),
        ],
        &manifest,
    )
    .unwrap();
    let dets = dir.join("dets.jsonl");
    write_detections(
        &[
            det("0.pgm", a.bbox, 0.9),
            det("0.pgm", far(0.0), 0.8),
            det("1.pgm", b.bbox, 0.7),
            det("1.pgm", far(100.0), 0.6),
            det("2.pgm", e.bbox, 0.85),
            det("2.pgm", far(200.0), 0.5),
            det("3.pgm", far(300.0), 0.75),
        ],
        &dets,
    )
    .unwrap();
    (dets, manifest)
}

#[test]
fn eval_prints_hand_derived_lamr() {
    let dir = tempfile::tempdir().unwrap();
    let (dets, manifest) = write_fixture(dir.path());
    let out = dir.path().join("out");
    let o = run(&["eval", dets.to_str().unwrap(), manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let samples = [0.75f64, 0.75, 0.75, 0.75, 0.75, 0.75, 0.75, 0.5, 0.5];
    let expected = (samples.iter().map(|m| m.ln()).sum::<f64>() / 9.0).exp();
    assert_eq!(stdout(&o).trim(), format!("log-average miss rate: {expected}"));
    let csv = fs::read_to_string(out.join("curve_mr.csv")).unwrap();
    assert!(csv.starts_with("x,y\n0,0.75\n"));
    assert_eq!(csv.lines().filter(|l| l.starts_with('#')).count(), 9);
}

#[test]
fn eval_ap_ladder() {
    let dir = tempfile::tempdir().unwrap();
    let (g1, g2) = (ped(10.0, 10.0, 100.0), ped(200.0, 10.0, 100.0));
    let manifest = dir.path().join("m.jsonl");
    write_manifest(&[ManifestRecord::new("0.pgm", 640, 480, &[g1, g2])], &manifest).unwrap();
    let dets = dir.path().join("d.jsonl");
    write_detections(&[det("0.pgm", g1.bbox, 0.9), det("0.pgm", BBox::new(500.0, 0.0, 40.0, 100.0).unwrap(), 0.8)], &dets).unwrap();
    let out = dir.path().join("out");
    let o = run(&["eval", dets.to_str().unwrap(), manifest.to_str().unwrap(), "--protocol", "ap", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), format!("average precision: {}", 6.0 / 11.0));
    assert!(out.join("curve_ap.csv").exists());
}

#[test]
fn gradcheck_default_config_passes() {
    let o = run(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("all gradients within"));
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "learning_rat = 0.1\n").unwrap();
    let o = run(&["--config", bad.to_str().unwrap(), "gradcheck"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));

    let missing = dir.path().join("none.jsonl");
    let o = run(&["eval", missing.to_str().unwrap(), missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let garbage = dir.path().join("g.jsonl");
    fs::write(&garbage, "{\"image_path\": 3}\n").unwrap();
    let o = run(&["eval", garbage.to_str().unwrap(), garbage.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":1:"));
}

const TINY: &str = "image_w = 160\nimage_h = 128\nmin_height = 30.0\nmax_height = 110.0\n\
                    train_images = 10\ntest_images = 4\nn_b_train = 4\n";

/// synth, train both stages, detect, eval, dumpfeat; returns artifact bytes.
fn full_run(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.join("out");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let step = |args: &[&str]| {
        let mut full = vec!["--config", c, "--out", o];
        full.extend_from_slice(args);
        let r = run(&full);
        assert!(r.status.success(), "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
    };
    step(&["synth"]);
    step(&["train", "rpn"]);
    step(&["train", "bcn"]);
    let test = out.join("test/manifest.jsonl");
    let (rpn, bcn) = (out.join("rpn.ckpt"), out.join("bcn.ckpt"));
    step(&["detect", test.to_str().unwrap(), "--rpn", rpn.to_str().unwrap(), "--bcn", bcn.to_str().unwrap()]);
    let dets = out.join("detections.jsonl");
    step(&["eval", dets.to_str().unwrap(), test.to_str().unwrap()]);
    step(&["dumpfeat", rpn.to_str().unwrap(), out.join("test/000000.pgm").to_str().unwrap()]);
    [
        "train/manifest.jsonl",
        "train/000003.pgm",
        "rpn.ckpt",
        "bcn.ckpt",
        "rpn_loss.csv",
        "bcn_loss.csv",
        "detections.jsonl",
        "curve_mr.csv",
        "conv5_relu.pgm",
    ]
    .iter()
    .map(|f| (f.to_string(), fs::read(out.join(f)).unwrap()))
    .collect()
}

#[test]
fn commands_are_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = full_run(a.path());
    let second = full_run(b.path());
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        assert!(!x.is_empty(), "{name} is empty");
        assert!(x == y, "{name} differs between runs");
    }
    let loss = String::from_utf8(first[4].1.clone()).unwrap();
    assert!(loss.starts_with("iteration,total,classification,regression,segmentation\n"));
    assert_eq!(loss.lines().count(), 11);
    let dets = String::from_utf8(first[6].1.clone()).unwrap();
    assert!(dets.lines().next().unwrap().contains("sdsrcnn-detections"));
    assert!(dets.lines().skip(1).all(|l| l.contains("\"bcn_score\":")));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let synth = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        let r = run(&["--config", cfg.to_str().unwrap(), "--seed", seed, "--out", out.to_str().unwrap(), "synth"]);
        assert!(r.status.success());
        fs::read(out.join("train/manifest.jsonl")).unwrap()
    };
    assert_eq!(synth("5", "a"), synth("5", "b"));
    assert_ne!(synth("5", "c"), synth("6", "d"));
}

#[test]
fn ablate_emits_five_rows_by_three_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY.replace("train_images = 10\ntest_images = 4", "train_images = 6\ntest_images = 3")).unwrap();
    let out = dir.path().join("out");
    let o = run(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "ablate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 6, "{table}");
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "row,rpn,bcn,fused");
    assert_eq!(rows.len(), 6);
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "no_weak_segmentation", "no_proposal_padding", "no_cost_sensitive", "no_strict_supervision"]);
    for r in &rows[1..] {
        let cols: Vec<f64> = r.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(cols.len(), 3);
        assert!(cols.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn shipped_configs_parse() {
    assert_eq!(RunConfig::load(&repo_configs().join("default.toml")).unwrap(), RunConfig::default());
    let trend = RunConfig::load(&repo_configs().join("trend.toml")).unwrap();
    assert_eq!((trend.train_images, trend.test_images), (2000, 500));
}
