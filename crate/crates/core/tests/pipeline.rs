use std::fs;
use std::path::Path;

use dve_core::closed_set::{pixel_accuracy, train_linear_probe};
use dve_core::distill::{cosine_distill_loss, student_forward, train_student};
use dve_core::io::manifest::{load_probe_manifest, load_scan_manifest, load_student_manifest};
use dve_core::io::{self, write_depth_pgm};
use dve_core::map3d::{map_query, DepthImage};
use dve_core::synth::{self, random_unit, to_f32};
use dve_core::{
    classify_argmax, evaluate_miou, probe_predict, Dtype, EmbeddingBank, EmbeddingVector, MapBuilder, SegmentMaskMap,
    SegmentRecord, SegmentRecords, StudentParams, SuppressionConfig, TrainConfig,
};
use serde_json::json;

fn unit(seed: u64, dim: usize) -> EmbeddingVector {
    EmbeddingVector::new(to_f32(&random_unit(&mut synth::rng(seed), dim))).unwrap()
}

fn write_json(path: &Path, value: serde_json::Value) {
    fs::write(path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
}

#[test]
fn segments_to_trained_student() {
    let dir = tempfile::tempdir().unwrap();
    let (h, w, d_in, d) = (6, 6, 8, 12);

    // left half segment 1, right half segment 2, bottom row unlabeled
    let ids: Vec<u16> = (0..h * w)
        .map(|p| match (p / w, p % w) {
            (r, _) if r == h - 1 => 0,
            (_, c) if c < w / 2 => 1,
            _ => 2,
        })
        .collect();
    let mask = SegmentMaskMap::new(h, w, ids).unwrap();
    let mut records = SegmentRecords::new();
    records.insert(SegmentRecord::new(0, None, unit(1, d)).unwrap()).unwrap();
    records.insert(SegmentRecord::new(1, Some(0), unit(2, d)).unwrap()).unwrap();
    records.insert(SegmentRecord::new(2, Some(1), unit(3, d)).unwrap()).unwrap();

    let features = synth::random_volume(&mut synth::rng(4), h, w, d_in);
    io::write_volume(&features, Dtype::F32, dir.path().join("f.dvem")).unwrap();
    io::write_mask_map(&mask, dir.path().join("m.smsk")).unwrap();
    io::write_segment_records(&records, dir.path().join("s.sege")).unwrap();
    write_json(
        &dir.path().join("train.json"),
        json!([{"features": "f.dvem", "mask": "m.smsk", "segments": "s.sege", "alpha": 0.65}]),
    );

    let samples = load_student_manifest(dir.path().join("train.json")).unwrap();
    let (_, teacher) = &samples[0];
    assert_eq!(teacher.covered_pixels(), (h - 1) * w);

    // teacher pixels carry the refined segment embeddings
    let mut refined = records.clone();
    refined.refine(SuppressionConfig::new(0.65).unwrap()).unwrap();
    let seg1 = refined.get(1).unwrap().refined_embedding.as_ref().unwrap();
    assert_eq!(teacher.embeddings().pixel(0), seg1.as_slice());

    let cfg = TrainConfig {
        learning_rate: 1e-2,
        iterations: 300,
        ..TrainConfig::default()
    };
    let init = StudentParams::random(&[d_in, 16, d], 5).unwrap();
    let (params, history) = train_student(&samples, &cfg, init).unwrap();
    let pred = student_forward(&samples[0].0, &params).unwrap();
    let fin = cosine_distill_loss(&pred, teacher).unwrap().loss;
    assert!(fin < history[0] * 0.5, "loss {} -> {fin}", history[0]);
}

#[test]
fn probe_manifest_to_miou() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth::two_clusters(10, 12, 12, 16, 0.1, 0.05);
    io::write_volume(&scene.map, Dtype::F16, dir.path().join("x.dvem")).unwrap();
    io::write_label_map(&scene.labels, dir.path().join("x.lmap")).unwrap();
    write_json(&dir.path().join("probe.json"), json!([{"map": "x.dvem", "labels": "x.lmap"}]));

    let samples = load_probe_manifest(dir.path().join("probe.json")).unwrap();
    let probe = train_linear_probe(&samples, 2, &TrainConfig::default()).unwrap();
    let pred = probe_predict(&samples[0].0, &probe).unwrap();
    assert!(pixel_accuracy(&pred, &scene.labels).unwrap() >= 0.99);

    let report = evaluate_miou(&pred, &scene.labels, 2, &[]).unwrap();
    assert!(report.mean_iou >= 0.98);
    assert_eq!(report.confusion.iter().sum::<u64>(), 144);
}

#[test]
fn bank_references_classify_round_tripped_volume() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth::two_clusters(20, 8, 8, 16, 0.0, 0.02);
    let mut bank = EmbeddingBank::new(16, Vec::new()).unwrap();
    bank.push("left", EmbeddingVector::new(to_f32(&scene.centers[0])).unwrap()).unwrap();
    bank.push("right", EmbeddingVector::new(to_f32(&scene.centers[1])).unwrap()).unwrap();
    bank.save(dir.path().join("bank.json")).unwrap();
    io::write_volume(&scene.map, Dtype::F32, dir.path().join("v.dvem")).unwrap();

    let bank = EmbeddingBank::load(dir.path().join("bank.json")).unwrap();
    let map = io::read_volume(dir.path().join("v.dvem")).unwrap();
    let out = classify_argmax(&map, &bank.reference_set().unwrap()).unwrap();
    assert_eq!(out.labels, scene.labels);

    io::write_label_map(&out.labels, dir.path().join("out.lmap")).unwrap();
    assert_eq!(io::read_label_map(dir.path().join("out.lmap")).unwrap(), scene.labels);
}

#[test]
fn scans_fuse_into_queryable_map() {
    let dir = tempfile::tempdir().unwrap();
    let d = 8;
    let (a, b) = (unit(30, d), unit(31, d));
    // two views of a 2x2 image; the left column sees `a`, the right `b`
    let pixels = [a.clone(), b.clone(), a.clone(), b.clone()];
    let emb = dve_core::DenseEmbeddingMap::from_pixels(2, 2, &pixels).unwrap();
    io::write_volume(&emb, Dtype::F32, dir.path().join("e.dvem")).unwrap();
    write_depth_pgm(&DepthImage::new(2, 2, vec![2000; 4]).unwrap(), dir.path().join("d.pgm")).unwrap();
    let intr = json!({"fx": 1.0, "fy": 1.0, "cx": 0.5, "cy": 0.5, "depth_scale": 0.001});
    let identity = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    let mut shifted = identity;
    shifted[3] = 0.01;
    write_json(
        &dir.path().join("scans.json"),
        json!([
            {"embedding_map": "e.dvem", "depth": "d.pgm", "intrinsics": intr, "pose": identity},
            {"embedding_map": "e.dvem", "depth": "d.pgm", "intrinsics": intr, "pose": shifted},
        ]),
    );

    let scans = load_scan_manifest(dir.path().join("scans.json")).unwrap();
    let mut builder = MapBuilder::new(0.5, d).unwrap();
    for s in &scans {
        builder.insert_image(&s.embeddings, &s.depth, &s.intrinsics, &s.pose).unwrap();
    }
    let (map, dropped) = builder.freeze();
    assert!(dropped.is_empty());
    assert_eq!(map.cells().map(|(_, c)| u64::from(c.count)).sum::<u64>(), 8);

    let hits = map_query(&map, &a).unwrap();
    let (best, sim) = hits[0];
    assert!((sim - 1.0).abs() < 1e-6);
    // x = (u - cx) * z / fx with u = 0 lands left of the origin
    assert!(best[0] < 0);

    io::write_map3d(&map, dir.path().join("m.dve3")).unwrap();
    let text = io::describe_file(dir.path().join("m.dve3")).unwrap();
    assert!(text.starts_with("format DVE3\n"));
}
