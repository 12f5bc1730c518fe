use std::path::Path;
use std::process::{Command, Output};

use dve_core::io::{self, write_depth_pgm, BankEntry};
use dve_core::map3d::DepthImage;
use dve_core::synth::{self, to_f32};
use dve_core::{Dtype, EmbeddingBank, EmbeddingVector, LabelMap, SegmentMaskMap, SegmentRecord, SegmentRecords};
use serde_json::json;

fn dve(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dve"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dve(dir, args);
    assert!(
        out.status.success(),
        "dve {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("no {key} in {text:?}"))
        .parse()
        .unwrap()
}

fn ev(v: &[f64]) -> EmbeddingVector {
    EmbeddingVector::new(to_f32(v)).unwrap()
}

#[test]
fn train_predict_and_score_student() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let task = synth::linear_task(1, 6, 6, 8, 12);
    io::write_volume(&task.features, Dtype::F32, p.join("f.dvem")).unwrap();
    io::write_volume(task.teacher.embeddings(), Dtype::F32, p.join("t.dvem")).unwrap();
    io::write_mask_map(&SegmentMaskMap::new(6, 6, vec![1; 36]).unwrap(), p.join("m.smsk")).unwrap();
    std::fs::write(
        p.join("train.json"),
        json!([{"features": "f.dvem", "mask": "m.smsk", "teacher": "t.dvem"}]).to_string(),
    )
    .unwrap();

    let out = ok(p, &[
        "train-student", "--manifest", "train.json", "--out", "student.json", "--lr", "1e-2", "--iters", "300",
        "--history", "hist.txt",
    ]);
    let (first, last) = (field(&out, "initial_loss"), field(&out, "final_loss"));
    assert!(last < first && last < 0.05, "{out}");
    assert_eq!(std::fs::read_to_string(p.join("hist.txt")).unwrap().lines().count(), 300);

    ok(p, &["predict", "--params", "student.json", "--features", "f.dvem", "--out", "pred.dvem"]);
    let loss = ok(p, &["loss", "--pred", "pred.dvem", "--teacher", "t.dvem", "--mask", "m.smsk"]);
    assert_eq!(field(&loss, "covered_pixels"), 36.0);
    assert!(field(&loss, "loss") < 0.05);
}

#[test]
fn segment_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let scene = synth::two_clusters(2, 8, 8, 16, 0.0, 0.02);
    io::write_volume(&scene.map, Dtype::F32, p.join("x.dvem")).unwrap();
    io::write_label_map(&scene.labels, p.join("gt.lmap")).unwrap();
    let bank = EmbeddingBank::new(
        16,
        vec![
            BankEntry { name: "floor".into(), vector: ev(&scene.centers[0]) },
            BankEntry { name: "wall".into(), vector: ev(&scene.centers[1]) },
        ],
    )
    .unwrap();
    bank.save(p.join("bank.json")).unwrap();

    let legend = ok(p, &["segment", "--map", "x.dvem", "--mode", "text", "--refs", "bank.json", "--out", "pred.lmap"]);
    assert_eq!(legend, "0 floor\n1 wall\n");
    let eval = ok(p, &["eval-miou", "--pred", "pred.lmap", "--gt", "gt.lmap", "--classes", "2"]);
    assert_eq!(eval, "0 1\n1 1\nmean 1\n");

    // probe path through the probe manifest
    std::fs::write(p.join("probe.json"), json!([{"map": "x.dvem", "labels": "gt.lmap"}]).to_string()).unwrap();
    ok(p, &["probe-train", "--manifest", "probe.json", "--classes", "2", "--out", "w.json", "--iters", "100"]);
    ok(p, &["segment", "--map", "x.dvem", "--mode", "probe", "--probe", "w.json", "--out", "probe.lmap"]);
    let eval = ok(p, &["eval-miou", "--pred", "probe.lmap", "--gt", "gt.lmap", "--classes", "2"]);
    assert_eq!(field(&eval, "mean"), 1.0);
}

#[test]
fn eval_reports_undefined_and_excluded_classes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    io::write_label_map(&LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap(), p.join("pred.lmap")).unwrap();
    io::write_label_map(&LabelMap::new(1, 4, vec![0, 1, 1, 1]).unwrap(), p.join("gt.lmap")).unwrap();
    let out = ok(p, &["eval-miou", "--pred", "pred.lmap", "--gt", "gt.lmap", "--classes", "3"]);
    assert_eq!(out, format!("0 0.5\n1 {}\n2 undefined\nmean {}\n", 2.0 / 3.0, 7.0 / 12.0));
    let out = ok(p, &["eval-miou", "--pred", "pred.lmap", "--gt", "gt.lmap", "--classes", "3", "--exclude", "0"]);
    assert!(out.starts_with("1 "), "{out}");
}

#[test]
fn visual_means_from_segments() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut recs = SegmentRecords::new();
    recs.insert(SegmentRecord::new(0, None, ev(&[0.0, 0.0, 1.0])).unwrap()).unwrap();
    recs.insert(SegmentRecord::new(1, Some(0), ev(&[2.0, 0.0, 0.0])).unwrap()).unwrap();
    recs.insert(SegmentRecord::new(2, Some(1), ev(&[0.0, 3.0, 0.0])).unwrap()).unwrap();
    io::write_segment_records(&recs, p.join("s.sege")).unwrap();

    let out = ok(p, &["refs-mean", "--segments", "s.sege", "--names", "red,green", "--raw", "--out", "refs.json"]);
    assert_eq!(out, "classes 2\n");
    let bank = EmbeddingBank::load(p.join("refs.json")).unwrap();
    assert_eq!(bank.names(), ["red", "green"]);
    assert_eq!(bank.lookup("red")[0].as_slice(), &[1.0, 0.0, 0.0]);
    assert_eq!(bank.lookup("green")[0].as_slice(), &[0.0, 1.0, 0.0]);
}

#[test]
fn build_and_query_map() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let (a, b) = (vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]);
    let pixels = [ev(&a), ev(&b)];
    let emb = dve_core::DenseEmbeddingMap::from_pixels(1, 2, &pixels).unwrap();
    io::write_volume(&emb, Dtype::F32, p.join("e.dvem")).unwrap();
    write_depth_pgm(&DepthImage::new(1, 2, vec![1000, 1000]).unwrap(), p.join("d.pgm")).unwrap();
    let identity = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    std::fs::write(
        p.join("scans.json"),
        json!([{
            "embedding_map": "e.dvem",
            "depth": "d.pgm",
            "intrinsics": {"fx": 1.0, "fy": 1.0, "cx": 0.25, "cy": 0.0, "depth_scale": 0.001},
            "pose": identity,
        }])
        .to_string(),
    )
    .unwrap();
    let out = ok(p, &["map-build", "--manifest", "scans.json", "--cell-size", "0.5", "--out", "m.dve3"]);
    assert_eq!(out, "cells 2\ndropped_cells 0\nskipped_observations 0\n");

    EmbeddingBank::new(4, vec![BankEntry { name: "b".into(), vector: ev(&b) }])
        .unwrap()
        .save(p.join("bank.json"))
        .unwrap();
    let rows = ok(p, &["map-query", "--map", "m.dve3", "--query-name", "b", "--bank", "bank.json"]);
    // pixel 1 sits at x = 0.75, cell 1; pixel 0 at x = -0.25, cell -1
    assert_eq!(rows, "1 0 2 1\n-1 0 2 0\n");
    let top = ok(p, &["map-query", "--map", "m.dve3", "--query-name", "b", "--bank", "bank.json", "--top", "1"]);
    assert_eq!(top.lines().count(), 1);
}

#[test]
fn info_and_convert() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let vol = dve_core::DenseEmbeddingMap::new(1, 2, 2, vec![0.5, -1.0, 0.0, 0.0]).unwrap();
    io::write_volume(&vol, Dtype::F32, p.join("a.dvem")).unwrap();
    ok(p, &["convert", "--input", "a.dvem", "--output", "b.dvem", "--dtype", "f16"]);
    assert_eq!(
        ok(p, &["info", "b.dvem"]),
        "format DVEM\nversion 1\nheight 1\nwidth 2\ndim 2\ndtype f16\npayload_bytes 8\nzero_pixels 1\n"
    );
    assert_eq!(io::read_volume(p.join("b.dvem")).unwrap(), vol);

    std::fs::write(p.join("junk.bin"), b"NOPE0000000000000000").unwrap();
    let out = dve(p, &["info", "junk.bin"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}
