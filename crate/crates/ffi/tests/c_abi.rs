use std::ffi::CStr;
use std::ptr;

use satcount_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sc_last_error()) }.to_string_lossy().into_owned()
}

/// 20x12 grey road with two bright 5x4 vehicles.
fn scene() -> (Vec<u8>, u32, u32) {
    let (w, h) = (20u32, 12u32);
    let mut px = vec![90u8; (w * h * 3) as usize];
    for (x0, y0) in [(2u32, 2u32), (12, 6)] {
        for y in y0..y0 + 4 {
            for x in x0..x0 + 5 {
                let i = ((y * w + x) * 3) as usize;
                px[i..i + 3].copy_from_slice(&[250, 250, 250]);
            }
        }
    }
    (px, w, h)
}

fn new_session() -> *mut ScSession {
    let (px, w, h) = scene();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { sc_session_new(px.as_ptr(), w, h, 3, &mut s) }, ScStatus::Ok);
    assert!(!s.is_null());
    s
}

#[test]
fn status_messages_are_static_strings() {
    for s in [ScStatus::Ok, ScStatus::NullPointer, ScStatus::Conflict, ScStatus::Internal] {
        let msg = unsafe { CStr::from_ptr(sc_status_message(s)) };
        assert!(!msg.to_bytes().is_empty());
    }
}

#[test]
fn annotation_session_round_trip() {
    let s = new_session();
    unsafe {
        let mut id = 0u32;
        let mut n = 0usize;
        assert_eq!(sc_session_flood_fill(s, 3, 3, &mut id, &mut n), ScStatus::Conflict);
        assert!(last_error().contains("road"), "{}", last_error());

        let mut road = ScHsv::default();
        assert_eq!(sc_session_set_road_color(s, 0, 0, &mut road), ScStatus::Ok);
        assert!(road.s.abs() < 1e-12);

        assert_eq!(sc_session_flood_fill(s, 3, 3, &mut id, &mut n), ScStatus::Ok);
        assert_eq!((id, n), (1, 20));
        assert_eq!(sc_session_flood_fill(s, 14, 7, &mut id, &mut n), ScStatus::Ok);
        assert_eq!((id, n), (2, 20));
        assert_eq!(sc_session_flood_fill(s, 99, 0, &mut id, &mut n), ScStatus::OutOfBounds);

        let (mut w, mut h) = (0, 0);
        assert_eq!(sc_session_size(s, &mut w, &mut h), ScStatus::Ok);
        let mut labels = vec![0u32; (w * h) as usize];
        assert_eq!(sc_session_labels(s, labels.as_mut_ptr(), 3), ScStatus::BufferTooSmall);
        assert_eq!(sc_session_labels(s, labels.as_mut_ptr(), labels.len()), ScStatus::Ok);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 20);
        assert_eq!(labels[(3 * w + 3) as usize], 1);

        let mut count = 0usize;
        assert_eq!(sc_session_boxes(s, ptr::null_mut(), ptr::null_mut(), 0, &mut count), ScStatus::Ok);
        assert_eq!(count, 2);
        let mut ids = [0u32; 2];
        let mut boxes = [ScBox::default(); 2];
        assert_eq!(sc_session_boxes(s, ids.as_mut_ptr(), boxes.as_mut_ptr(), 2, &mut count), ScStatus::Ok);
        assert_eq!(ids, [1, 2]);
        assert_eq!(boxes[0], ScBox { x_min: 2.0, y_min: 2.0, x_max: 7.0, y_max: 6.0 });

        let pts = [0u32, 11, 19, 11];
        assert_eq!(
            sc_session_stroke(s, ScStrokeKind::StraightLine, pts.as_ptr(), 2, 0, &mut id, &mut n),
            ScStatus::Ok
        );
        assert_eq!((id, n), (3, 20));

        let mut cleared = 0usize;
        assert_eq!(sc_session_erase(s, 2, &mut cleared), ScStatus::Ok);
        assert_eq!(cleared, 20);
        assert_eq!(sc_session_erase(s, 42, &mut cleared), ScStatus::NotFound);

        let mut flag = false;
        for _ in 0..4 {
            assert_eq!(sc_session_undo(s, &mut flag), ScStatus::Ok);
            assert!(flag);
        }
        assert_eq!(sc_session_undo(s, &mut flag), ScStatus::Ok);
        assert!(!flag);
        assert_eq!(sc_session_redo(s, &mut flag), ScStatus::Ok);
        assert!(flag);

        assert_eq!(sc_session_set_settings(s, -1.0, 0.1), ScStatus::InvalidArgument);
        sc_session_free(s);
    }
}

#[test]
fn null_and_malformed_arguments() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(sc_session_new(ptr::null(), 4, 4, 3, &mut s), ScStatus::NullPointer);
        let px = [0u8; 16];
        assert_eq!(sc_session_new(px.as_ptr(), 4, 4, 2, &mut s), ScStatus::InvalidArgument);
        assert!(s.is_null());
        sc_session_free(ptr::null_mut());
        assert_eq!(sc_rgb_to_hsv(1, 2, 3, ptr::null_mut()), ScStatus::NullPointer);
        let mut v = 0.0;
        let bad = ScBox { x_min: 3.0, y_min: 0.0, x_max: 1.0, y_max: 1.0 };
        assert_eq!(sc_iou(&bad, &bad, &mut v), ScStatus::InvalidArgument);
    }
}

#[test]
fn color_geometry_and_metrics() {
    unsafe {
        let mut c = ScHsv::default();
        assert_eq!(sc_rgb_to_hsv(255, 0, 0, &mut c), ScStatus::Ok);
        assert_eq!((c.h, c.s, c.v), (0.0, 1.0, 1.0));
        let grey = ScHsv { h: 0.0, s: 0.0, v: 1.0 };
        assert!((sc_sv_distance(c, grey) - 1.0).abs() < 1e-12);

        let a = ScBox { x_min: 0.0, y_min: 0.0, x_max: 4.0, y_max: 4.0 };
        let b = ScBox { x_min: 2.0, y_min: 0.0, x_max: 6.0, y_max: 4.0 };
        let mut v = 0.0;
        assert_eq!(sc_iou(&a, &b, &mut v), ScStatus::Ok);
        assert!((v - 8.0 / 24.0).abs() < 1e-12);

        let mut m = ScMetrics::default();
        assert_eq!(sc_metrics(3, 1, 1, &mut m), ScStatus::Ok);
        assert_eq!(m.counted, 4);
        assert!(m.recall_defined && (m.recall - 0.75).abs() < 1e-12);
        assert_eq!(sc_metrics(0, 0, 0, &mut m), ScStatus::Ok);
        assert!(!m.recall_defined && !m.precision_defined);
        assert_eq!(sc_metrics(-1, 0, 0, &mut m), ScStatus::InvalidArgument);
    }
}

#[test]
fn nms_reports_survivor_count() {
    let d = |x: f64, score| ScDetection { bbox: ScBox { x_min: x, y_min: 0.0, x_max: x + 4.0, y_max: 4.0 }, score };
    let dets = [d(0.0, 0.6), d(0.5, 0.9), d(20.0, 0.3)];
    let mut n = 0usize;
    unsafe {
        assert_eq!(sc_nms(dets.as_ptr(), 3, 0.5, ptr::null_mut(), 0, &mut n), ScStatus::Ok);
        assert_eq!(n, 2);
        let mut out = [ScDetection::default(); 2];
        assert_eq!(sc_nms(dets.as_ptr(), 3, 0.5, out.as_mut_ptr(), 1, &mut n), ScStatus::BufferTooSmall);
        assert_eq!(sc_nms(dets.as_ptr(), 3, 0.5, out.as_mut_ptr(), 2, &mut n), ScStatus::Ok);
        assert_eq!(out[0], dets[1]);
        assert_eq!(out[1], dets[2]);
        assert_eq!(sc_nms(ptr::null(), 0, 0.5, ptr::null_mut(), 0, &mut n), ScStatus::Ok);
        assert_eq!(n, 0);
        assert_eq!(sc_nms(dets.as_ptr(), 3, 1.5, out.as_mut_ptr(), 2, &mut n), ScStatus::InvalidArgument);
    }
}

#[test]
fn counting_and_tiling() {
    let (w, h) = (32u32, 16u32);
    let mut mask = vec![0u8; (w * h) as usize];
    for (x0, y0) in [(1u32, 1u32), (20, 6)] {
        for y in y0..y0 + 8 {
            for x in x0..x0 + 5 {
                mask[(y * w + x) as usize] = 255;
            }
        }
    }
    unsafe {
        let mut total = 0u64;
        assert_eq!(sc_count_mask(mask.as_ptr(), w, h, ptr::null(), &mut total), ScStatus::Ok);
        assert_eq!(total, 2);
        let mut cfg = sc_count_config_default();
        cfg.min_blob_area = 41;
        assert_eq!(sc_count_mask(mask.as_ptr(), w, h, &cfg, &mut total), ScStatus::Ok);
        assert_eq!(total, 0);
        cfg.mean_px_lined = 0.0;
        assert_eq!(sc_count_mask(mask.as_ptr(), w, h, &cfg, &mut total), ScStatus::InvalidArgument);

        let mut count = 0usize;
        assert_eq!(sc_plan_tiles(1000, 600, 512, 64, ptr::null_mut(), 0, &mut count), ScStatus::Ok);
        assert_eq!(count, 6);
        let mut origins = vec![0u32; 2 * count];
        assert_eq!(sc_plan_tiles(1000, 600, 512, 64, origins.as_mut_ptr(), count, &mut count), ScStatus::Ok);
        assert_eq!(&origins[..6], &[0, 0, 448, 0, 488, 0]);
        assert_eq!(&origins[6..8], &[0, 88]);
        assert_eq!(sc_plan_tiles(100, 100, 64, 64, origins.as_mut_ptr(), count, &mut count), ScStatus::InvalidArgument);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/satcount.h")).unwrap();
    let source = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|s| s.split('(').next().unwrap())
        .collect();
    assert!(exports.len() > 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct ScSession ScSession;"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, "#include \"satcount.h\"\nint main(void) { return sc_status_message(SC_STATUS_OK) == 0; }\n").unwrap();
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
