use std::path::Path;
use std::process::{Command, Output};

use forestmap::harness::io;
use forestmap::labelfuse::{self, class_counts, fuse_stack, PixelEvidence, SourceStack, WorldCover, NUM_CLASSES};
use serde_json::Value;

fn forestmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forestmap")).args(args).output().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str) -> Value {
    json(&forestmap(&[
        "gen", "--scenario", "easy", "--plots", "12", "--seed", seed, "--grid", "16", "--blocks", "10", "--out", s(dir),
    ]))
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(forestmap(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(forestmap(&["gen", "--plots", "3"]).status.code(), Some(2));
    assert_eq!(forestmap(&["gen", "--cadence", "weekly", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_with_path() {
    let out = forestmap(&["stats", "/nonexistent/dataset"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/dataset"));
    let tmp = tempfile::tempdir().unwrap();
    let out = forestmap(&["gen", "--scenario", "nope", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_stats_sample_agree_with_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let summary = gen(&data, "4");
    assert_eq!(summary["plots"], 12);
    assert_eq!(summary["blocks"], serde_json::json!([8, 1, 1]));

    let stats = json(&forestmap(&["stats", s(&data), "--out", s(&tmp.path().join("st"))]));
    let (_, plots) = io::read_dataset(&data).unwrap();
    let mut pixels = [0u64; NUM_CLASSES];
    let mut unknown = 0;
    for p in &plots {
        let (c, u) = class_counts(&p.labels);
        for (a, b) in pixels.iter_mut().zip(c) {
            *a += b;
        }
        unknown += u;
    }
    assert_eq!(stats["images"], 12);
    assert_eq!(stats["pixel_counts"], serde_json::json!(pixels));
    assert_eq!(stats["unknown_pixels"], unknown);
    assert!(tmp.path().join("st/stats.csv").exists());

    let dominant: Vec<u64> = serde_json::from_value(stats["dominant_counts"].clone()).unwrap();
    let (idx, &have) = dominant.iter().enumerate().max_by_key(|(_, &n)| n).unwrap();
    let pick = have.min(3);
    let frac = format!("{}={}", labelfuse::ClassId::REAL[idx].code(), pick as f64 / 6.0);
    let sample = json(&forestmap(&["sample", s(&data), "--plots", "6", "--fractions", &frac]));
    assert_eq!(sample["selected"].as_array().unwrap().len() as u64, pick);

    let short = forestmap(&["sample", s(&data), "--plots", "100", "--fractions", &format!("{}=1.0", labelfuse::ClassId::REAL[idx].code())]);
    assert_eq!(short.status.code(), Some(1));
}

#[test]
fn train_then_eval_reproduces_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, "9");
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny run\nd = 8\nheads = 2\nlayers = 1\nepochs = 2\nbatch_size = 4\nseeds = 3\n").unwrap();
    let out = tmp.path().join("run");
    let summary = json(&forestmap(&["train", "--config", s(&cfg), "--dataset", s(&data), "--out", s(&out)]));
    let seeds = summary["summary"]["seeds"].as_array().unwrap();
    assert_eq!(seeds.len(), 1);
    assert_eq!(seeds[0]["steps"], 6);
    assert!(out.join("report.json").exists());

    let ckpt = out.join("seed_3.ckpt");
    let eval = json(&forestmap(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--split", "val"]));
    assert_eq!(eval["report"]["seeds"][0], summary["summary"]["report"]["seeds"][0]);

    let bad = forestmap(&["train", "--config", s(&cfg), "--dataset", s(&tmp.path().join("missing")), "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn fuse_writes_label_rasters() {
    let tmp = tempfile::tempdir().unwrap();
    let pixels: Vec<PixelEvidence> = (0..12)
        .map(|i| PixelEvidence {
            natural: i % 2 == 0,
            planted: i % 3 == 0,
            treecrop: false,
            worldcover: WorldCover::ALL[i % 6],
            sbtn_vegetation: i % 4 == 1,
            tree_height: (i as f32) * 0.7,
            deforested: i % 5 == 1,
            regrowth_confident: true,
        })
        .collect();
    let stack = SourceStack::from_pixels(3, 4, &pixels).unwrap();
    let dir = tmp.path().join("plot_a");
    io::write_stack(&dir, &stack).unwrap();
    let out = tmp.path().join("labels");
    let summary = json(&forestmap(&["fuse", s(&dir), "--out", s(&out)]));
    let written = std::fs::read(out.join("plot_a.labels.u8")).unwrap();
    assert_eq!(written, fuse_stack(&stack).unwrap().codes());
    assert_eq!(summary["outputs"].as_array().unwrap().len(), 1);
}
