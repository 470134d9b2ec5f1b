use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use satcount::annotate::{extract_boxes, read_boxes_jsonl, AnnotationSession, InstanceMask};
use satcount::config::PipelineConfig;
use satcount::raster::decode_gray16_png;
use satcount::service::{self, router, ServiceError, SessionStore};
use satcount::RasterImage;

const ROAD: [u8; 3] = [90, 90, 95];
const CAR: [u8; 3] = [240, 240, 240];

/// 40x30 road with three separate bright 5x8 vehicles.
fn scene() -> RasterImage {
    let (w, h) = (40u32, 30u32);
    let mut data = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let car = [(4, 4), (20, 6), (30, 18)]
                .iter()
                .any(|&(x0, y0)| x >= x0 && x < x0 + 5 && y >= y0 && y < y0 + 8);
            data.extend_from_slice(if car { &CAR } else { &ROAD });
        }
    }
    RasterImage::new(w, h, 3, data).unwrap()
}

fn setup(dir: &Path) -> Arc<SessionStore> {
    scene().save_png(dir.join("scene.png")).unwrap();
    Arc::new(SessionStore::new(dir, dir.join(".sessions")))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req.header("content-type", "application/json").body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn json_call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn create(app: &Router) -> String {
    let (s, v) = json_call(app, Method::POST, "/sessions", Some(json!({"image": "scene.png"}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!((v["width"].as_u64(), v["height"].as_u64()), (Some(40), Some(30)));
    v["session_id"].as_str().unwrap().to_string()
}

async fn ids_mask(app: &Router, id: &str) -> (Vec<u8>, InstanceMask) {
    let (s, bytes) = call(app, Method::GET, &format!("/sessions/{id}/mask?format=ids"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (w, h, ids) = decode_gray16_png(&bytes).unwrap();
    let mask = InstanceMask::from_labels(w, h, ids.into_iter().map(u32::from).collect()).unwrap();
    (bytes, mask)
}

#[tokio::test]
async fn health_and_unknown_resources() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(setup(dir.path()), None);
    let (s, body) = call(&app, Method::GET, "/healthz", None).await;
    assert_eq!((s, body.as_slice()), (StatusCode::OK, b"ok".as_slice()));

    for name in ["missing.png", "../scene.png", "/etc/passwd", ""] {
        let (s, _) = json_call(&app, Method::POST, "/sessions", Some(json!({ "image": name }))).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{name}");
    }
    let (s, v) = json_call(&app, Method::GET, "/sessions/nope/boxes", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].is_string());
}

#[tokio::test]
async fn click_through_matches_the_engine() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(setup(dir.path()), None);
    let id = create(&app).await;

    let (s, _) = json_call(&app, Method::POST, &format!("/sessions/{id}/floodfill"), Some(json!({"x": 5, "y": 5}))).await;
    assert_eq!(s, StatusCode::CONFLICT, "fill before road color");

    let (s, v) = json_call(&app, Method::POST, &format!("/sessions/{id}/road-color"), Some(json!({"x": 0, "y": 0}))).await;
    assert_eq!(s, StatusCode::OK);
    assert!((v["v"].as_f64().unwrap() - 95.0 / 255.0).abs() < 1e-12);

    let (s, v) = json_call(&app, Method::POST, &format!("/sessions/{id}/floodfill"), Some(json!({"x": 5, "y": 5}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["instance_id"], 1);
    assert_eq!(v["pixel_count"], 40);
    assert_eq!(v["bounds"], json!({"x_min": 4, "y_min": 4, "x_max": 9, "y_max": 12}));

    let (s, _) = json_call(&app, Method::POST, &format!("/sessions/{id}/floodfill"), Some(json!({"x": 5, "y": 5}))).await;
    assert_eq!(s, StatusCode::CONFLICT, "seed already labeled");
    let (s, _) = json_call(&app, Method::POST, &format!("/sessions/{id}/floodfill"), Some(json!({"x": 40, "y": 0}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "out of bounds");

    let (s, v) = json_call(&app, Method::POST, &format!("/sessions/{id}/floodfill"), Some(json!({"x": 22, "y": 9}))).await;
    assert_eq!((s, v["instance_id"].as_u64()), (StatusCode::OK, Some(2)));
    let (s, v) = json_call(
        &app,
        Method::POST,
        &format!("/sessions/{id}/stroke"),
        Some(json!({"kind": "straight-line", "points": [[30, 18], [34, 25]], "radius": 1})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["instance_id"], 3);

    let (s, bytes) = call(&app, Method::GET, &format!("/sessions/{id}/boxes"), None).await;
    assert_eq!(s, StatusCode::OK);
    let served = read_boxes_jsonl(bytes.as_slice()).unwrap();
    let (_, mask) = ids_mask(&app, &id).await;
    assert_eq!(served, extract_boxes(&mask));
    assert_eq!(served.len(), 3);

    // The same clicks straight on the engine give the same mask.
    let mut engine = AnnotationSession::new(Arc::new(scene()));
    engine.set_road_color(0, 0).unwrap();
    engine.flood_fill(5, 5).unwrap();
    engine.flood_fill(22, 9).unwrap();
    engine.apply_stroke(&satcount::annotate::Stroke::straight((30, 18), (34, 25), 1)).unwrap();
    assert_eq!(engine.mask().labels(), mask.labels());
}

#[tokio::test]
async fn undo_erase_config_and_renders() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(setup(dir.path()), None);
    let id = create(&app).await;
    let (before, _) = ids_mask(&app, &id).await;

    json_call(&app, Method::POST, &format!("/sessions/{id}/road-color"), Some(json!({"x": 0, "y": 0}))).await;
    json_call(&app, Method::POST, &format!("/sessions/{id}/floodfill"), Some(json!({"x": 5, "y": 5}))).await;
    let (s, v) = json_call(&app, Method::POST, &format!("/sessions/{id}/undo"), None).await;
    assert_eq!((s, v), (StatusCode::OK, json!({"reverted": true})));
    assert_eq!(ids_mask(&app, &id).await.0, before, "undo restores the pre-click mask");
    let (_, v) = json_call(&app, Method::POST, &format!("/sessions/{id}/undo"), None).await;
    assert_eq!(v, json!({"reverted": false}));

    json_call(&app, Method::POST, &format!("/sessions/{id}/floodfill"), Some(json!({"x": 5, "y": 5}))).await;
    let (s, v) = json_call(&app, Method::DELETE, &format!("/sessions/{id}/instances/1"), None).await;
    assert_eq!((s, v), (StatusCode::OK, json!({"cleared": 40})));
    let (s, _) = json_call(&app, Method::DELETE, &format!("/sessions/{id}/instances/9"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, v) = json_call(&app, Method::POST, &format!("/sessions/{id}/config"), Some(json!({"fill_tolerance": 0.2}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"fill_tolerance": 0.2, "road_margin": 0.1}));
    let (s, _) = json_call(&app, Method::POST, &format!("/sessions/{id}/config"), Some(json!({"road_margin": 0.0}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, png) = call(&app, Method::GET, &format!("/sessions/{id}/image"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(RasterImage::from_png_bytes(&png).unwrap(), scene());
    let (s, png) = call(&app, Method::GET, &format!("/sessions/{id}/mask"), None).await;
    assert_eq!(s, StatusCode::OK);
    let render = RasterImage::from_png_bytes(&png).unwrap();
    assert_eq!((render.width(), render.height(), render.channels()), (40, 30, 4));
    let (s, _) = call(&app, Method::GET, &format!("/sessions/{id}/mask?format=jpeg"), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn concurrent_fills_serialize() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(setup(dir.path()), None);
    let id = create(&app).await;
    json_call(&app, Method::POST, &format!("/sessions/{id}/road-color"), Some(json!({"x": 0, "y": 0}))).await;
    let uri = format!("/sessions/{id}/floodfill");
    let a = json_call(&app, Method::POST, &uri, Some(json!({"x": 5, "y": 5})));
    let b = json_call(&app, Method::POST, &uri, Some(json!({"x": 21, "y": 7})));
    let ((sa, _), (sb, _)) = tokio::join!(a, b);
    assert_eq!((sa, sb), (StatusCode::OK, StatusCode::OK));
    let (_, mask) = ids_mask(&app, &id).await;

    let orders = [[(5, 5), (21, 7)], [(21, 7), (5, 5)]];
    let finals: Vec<Vec<u32>> = orders
        .iter()
        .map(|order| {
            let mut s = AnnotationSession::new(Arc::new(scene()));
            s.set_road_color(0, 0).unwrap();
            for &(x, y) in order {
                s.flood_fill(x, y).unwrap();
            }
            s.mask().labels().to_vec()
        })
        .collect();
    assert!(finals.iter().any(|f| f == mask.labels()));
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let store = setup(dir.path());
    let app = router(Arc::clone(&store), None);
    let id = create(&app).await;
    json_call(&app, Method::POST, &format!("/sessions/{id}/road-color"), Some(json!({"x": 0, "y": 0}))).await;
    json_call(&app, Method::POST, &format!("/sessions/{id}/floodfill"), Some(json!({"x": 5, "y": 5}))).await;
    json_call(&app, Method::POST, &format!("/sessions/{id}/floodfill"), Some(json!({"x": 31, "y": 19}))).await;
    json_call(&app, Method::DELETE, &format!("/sessions/{id}/instances/1"), None).await;
    let (mask_before, _) = ids_mask(&app, &id).await;
    let (_, boxes_before) = call(&app, Method::GET, &format!("/sessions/{id}/boxes"), None).await;
    assert_eq!(store.flush_all().unwrap(), 1);
    let png_on_disk = std::fs::read(store.session_dir().join(format!("{id}.png"))).unwrap();

    let restored = Arc::new(SessionStore::new(dir.path(), dir.path().join(".sessions")));
    assert_eq!(restored.load_all().unwrap(), 1);
    let app2 = router(Arc::clone(&restored), None);
    let (mask_after, _) = ids_mask(&app2, &id).await;
    assert_eq!(mask_after, mask_before);
    let (_, boxes_after) = call(&app2, Method::GET, &format!("/sessions/{id}/boxes"), None).await;
    assert_eq!(boxes_after, boxes_before);

    // Road color and the id counter carry over: the next fill gets id 3 without re-picking.
    let (s, v) = json_call(&app2, Method::POST, &format!("/sessions/{id}/floodfill"), Some(json!({"x": 21, "y": 7}))).await;
    assert_eq!((s, v["instance_id"].as_u64()), (StatusCode::OK, Some(3)));

    restored.flush_all().unwrap();
    let again = SessionStore::new(dir.path(), dir.path().join(".sessions"));
    again.load_all().unwrap();
    again.flush_all().unwrap();
    let png_again = std::fs::read(store.session_dir().join(format!("{id}.png"))).unwrap();
    assert_ne!(png_again, png_on_disk, "the later fill was persisted");
}

#[tokio::test]
async fn static_files_are_served_from_the_ui_dir() {
    let dir = tempfile::tempdir().unwrap();
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html>labeler</html>").unwrap();
    let app = router(setup(dir.path()), Some(ui.path()));
    let (s, body) = call(&app, Method::GET, "/index.html", None).await;
    assert_eq!((s, body.as_slice()), (StatusCode::OK, b"<html>labeler</html>".as_slice()));
    let (s, _) = call(&app, Method::GET, "/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
}

fn http_get(addr: std::net::SocketAddr, path: &str) -> String {
    let mut stream = std::net::TcpStream::connect(addr).unwrap();
    write!(stream, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut out = String::new();
    stream.read_to_string(&mut out).unwrap();
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn serve_binds_flushes_on_shutdown_and_reports_busy_ports() {
    let dir = tempfile::tempdir().unwrap();
    scene().save_png(dir.path().join("scene.png")).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.service.image_root = dir.path().to_path_buf();

    let (listener, store) = service::bind(&cfg, "127.0.0.1:0".parse().unwrap()).await.unwrap();
    let addr = listener.local_addr().unwrap();
    store.create("scene.png").unwrap();

    match service::bind(&cfg, addr).await {
        Err(ServiceError::Bind { .. }) => {}
        other => panic!("expected a bind error, got {:?}", other.map(|_| ())),
    }

    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(service::serve_on(listener, Arc::clone(&store), None, async {
        let _ = rx.await;
    }));
    let reply = tokio::task::spawn_blocking(move || http_get(addr, "/healthz")).await.unwrap();
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.ends_with("ok"));
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();

    let saved: Vec<_> = std::fs::read_dir(cfg.service.session_dir()).unwrap().collect();
    assert_eq!(saved.len(), 2, "mask PNG and JSON sidecar");

    let mut bad = cfg.clone();
    bad.service.image_root = dir.path().join("absent");
    assert!(matches!(
        service::bind(&bad, "127.0.0.1:0".parse().unwrap()).await,
        Err(ServiceError::ImageRoot { .. })
    ));
}
