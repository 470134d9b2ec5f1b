use std::path::Path;
use std::process::{Command, Output};

use satcount::annotate::{write_boxes_jsonl, InstanceMask};
use satcount::detect::{write_detections_jsonl, Anchor, Detection, DetectionGrid, Source};
use satcount::geometry::{BoxF, PixelBox};
use satcount::{BinaryMask, RasterImage};
use serde_json::Value;

fn satcount(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_satcount"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn write_boxes(path: &Path, boxes: &[[u32; 4]]) {
    let records: Vec<_> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| (i as u32 + 1, PixelBox::new(b[0], b[1], b[2], b[3]).unwrap()))
        .collect();
    write_boxes_jsonl(std::fs::File::create(path).unwrap(), &records).unwrap();
}

fn three_blob_mask() -> BinaryMask {
    let mut m = BinaryMask::new(64, 64);
    for (x0, y0, w, h) in [(2u32, 2u32, 5u32, 8u32), (20, 20, 8, 5), (40, 40, 5, 8)] {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                m.set(x, y, true);
            }
        }
    }
    m
}

#[test]
fn eval_on_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let boxes = [[0, 0, 5, 8], [20, 20, 28, 25], [40, 3, 45, 11]];
    write_boxes(&dir.path().join("g.jsonl"), &boxes);
    let dets: Vec<_> = boxes
        .iter()
        .map(|b| Detection::new(BoxF::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64).unwrap(), 1.0, Source::Detector))
        .collect();
    write_detections_jsonl(std::fs::File::create(dir.path().join("p.jsonl")).unwrap(), &dets).unwrap();

    let out = satcount(dir.path(), &["eval", "--pred", "p.jsonl", "--gt", "g.jsonl", "--iou-min", "0.3", "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["recall"], 1.0);
    assert_eq!(report["precision"], 1.0);
    assert_eq!(report["tp"], 3);

    let out = satcount(dir.path(), &["eval", "--pred", "p.jsonl", "--gt", "g.jsonl", "--name", "YOLO"]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("YOLO"));
    assert!(table.lines().any(|l| l.starts_with("Recall") && l.ends_with("100.0%")));
}

#[test]
fn anchors_recover_distinct_boxes() {
    let dir = tempfile::tempdir().unwrap();
    write_boxes(&dir.path().join("boxes.jsonl"), &[[0, 0, 5, 8], [10, 10, 18, 15], [30, 30, 36, 36]]);
    let out = satcount(dir.path(), &["anchors", "--boxes", "boxes.jsonl", "--k", "3", "--seed", "4"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["anchors"], serde_json::json!([[6.0, 6.0], [5.0, 8.0], [8.0, 5.0]]));
    assert_eq!(v["cost"], 0.0);

    let again = satcount(dir.path(), &["anchors", "--boxes", "boxes.jsonl", "--k", "3", "--seed", "4"]);
    assert_eq!(again.stdout, out.stdout, "deterministic output");
}

#[test]
fn count_three_blob_fixture() {
    let dir = tempfile::tempdir().unwrap();
    three_blob_mask().save_png(dir.path().join("m.png")).unwrap();
    let out = satcount(dir.path(), &["count", "--mask", "m.png"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["total"], 3);
    assert_eq!(report["blobs"].as_array().unwrap().len(), 3);
}

#[test]
fn count_from_voted_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mask = three_blob_mask();
    mask.save_png(dir.path().join("a.png")).unwrap();
    // A horizontally flipped copy of the same prediction.
    let mut flipped = BinaryMask::new(64, 64);
    for y in 0..64 {
        for x in 0..64 {
            flipped.set(63 - x, y, mask.get(x, y));
        }
    }
    flipped.save_png(dir.path().join("b.png")).unwrap();
    BinaryMask::new(64, 64).save_png(dir.path().join("c.png")).unwrap();
    std::fs::write(
        dir.path().join("preds.json"),
        r#"{"width": 64, "height": 64, "predictions": [
            {"mask": "a.png"},
            {"mask": "b.png", "transform": {"flip": "horizontal"}},
            {"mask": "c.png"}
        ]}"#,
    )
    .unwrap();
    let out = satcount(
        dir.path(),
        &["count", "--predictions", "preds.json", "--votes-out", "votes.png", "--mask-out", "voted.png", "--out", "r.json"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["total"], 3);
    assert_eq!(BinaryMask::load_png(dir.path().join("voted.png")).unwrap(), mask);
    assert!(dir.path().join("votes.png").exists());
}

#[test]
fn decode_nms_fuse_chain() {
    let dir = tempfile::tempdir().unwrap();
    let mut g = DetectionGrid::zeros(4, 16, 16, vec![Anchor { w: 5.0, h: 8.0 }]).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            g.set_values(x, y, 0, [0.0, 0.0, 0.0, 0.0, -8.0]);
        }
    }
    // Vehicle at (4.5, 6) in the tile: a confident box and a weak twin, plus a weak stray.
    g.set_values(1, 1, 0, [0.0, 0.0, 0.0, 0.0, 3.0]);
    g.set_values(1, 2, 0, [0.0, -3.0, 0.0, 0.0, -0.5]);
    g.set_values(12, 12, 0, [0.0, 0.0, 0.0, 0.0, -1.0]);
    g.write_to(std::fs::File::create(dir.path().join("g.bin")).unwrap()).unwrap();

    let out = satcount(dir.path(), &["decode", "--grid", "g.bin", "--offset", "100,0", "--out", "raw.jsonl"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let raw = std::fs::read_to_string(dir.path().join("raw.jsonl")).unwrap();
    assert_eq!(raw.lines().count(), 3);
    let first: Value = serde_json::from_str(raw.lines().next().unwrap()).unwrap();
    assert_eq!(first["x_min"], 103.5);

    let out = satcount(dir.path(), &["nms", "--input", "raw.jsonl", "--out", "kept.jsonl"]);
    assert_eq!(out.status.code(), Some(0));
    let kept = std::fs::read_to_string(dir.path().join("kept.jsonl")).unwrap();
    assert_eq!(kept.lines().count(), 2, "{kept}");

    // Segmentation mask with a blob only under the stray.
    let mut mask = BinaryMask::new(200, 64);
    for y in 48..52 {
        for x in 148..152 {
            mask.set(x, y, true);
        }
    }
    mask.save_png(dir.path().join("seg.png")).unwrap();
    let out = satcount(dir.path(), &["fuse", "--detections", "kept.jsonl", "--mask", "seg.png", "--t-low", "0.2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let fused: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(fused.len(), 2);
    assert_eq!(fused[0]["source"], "detector");
    assert_eq!(fused[1]["source"], "fused");
}

#[test]
fn tile_and_stitch_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<u8> = (0..70 * 45 * 3).map(|i| (i * 7 % 251) as u8).collect();
    let img = RasterImage::new(70, 45, 3, data).unwrap();
    img.save_png(dir.path().join("in.png")).unwrap();
    let out = satcount(dir.path(), &["tile", "--input", "in.png", "--out-dir", "tiles", "--tile-size", "32", "--overlap", "8"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = satcount(dir.path(), &["tile", "--stitch", "tiles", "--output", "out.png"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(RasterImage::load_png(dir.path().join("out.png")).unwrap(), img);
}

#[test]
fn calibrate_from_instance_masks() {
    let dir = tempfile::tempdir().unwrap();
    let mut labels = vec![0u32; 40 * 40];
    // Three 5x8 vehicles bumper to bumper: one 5x24 lined block.
    for (id, y0) in [(1u32, 2u32), (2, 10), (3, 18)] {
        for y in y0..y0 + 8 {
            for x in 2..7 {
                labels[y as usize * 40 + x] = id;
            }
        }
    }
    InstanceMask::from_labels(40, 40, labels).unwrap().save_ids_png(dir.path().join("m.png")).unwrap();
    let out = satcount(dir.path(), &["calibrate", "--masks", "m.png"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["config"]["mean_px_lined"], 40.0);
    assert_eq!(v["lined_vehicles"], 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = satcount(dir.path(), &["eval", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = satcount(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let out = satcount(dir.path(), &["count", "--mask", "missing.png"]);
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(dir.path().join("bad.toml"), "[tiling]\noverlap = 600\n").unwrap();
    three_blob_mask().save_png(dir.path().join("m.png")).unwrap();
    let out = satcount(dir.path(), &["--config", "bad.toml", "count", "--mask", "m.png"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("overlap"));

    std::fs::write(dir.path().join("ok.toml"), "[counting]\nmin_blob_area = 50\n").unwrap();
    let out = satcount(dir.path(), &["count", "--mask", "m.png", "--config", "ok.toml"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["total"], 0);
}
