//! Local HTTP service for annotation sessions.
//!
//! Each session owns one image from `image_root` and its instance mask. Mutations on a
//! session hold that session's lock for the whole operation, so concurrent requests on one
//! session apply in some sequential order. Sessions are written to `session_dir` as a 16-bit
//! id PNG plus a JSON sidecar on shutdown and reloaded on startup; undo history is dropped.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::services::ServeDir;

use crate::annotate::{boxes_to_jsonl, AnnotateError, AnnotationSession, FillSettings, InstanceMask, Stroke, StrokeKind};
use crate::color::HsvColor;
use crate::config::PipelineConfig;
use crate::geometry::PixelBox;
use crate::raster::{RasterError, RasterImage};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("image root {path} is not readable: {source}")]
    ImageRoot { path: PathBuf, source: std::io::Error },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("session {id}: {message}")]
    Persist { id: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Error body `{"error": message}` with a status code.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl From<AnnotateError> for ApiError {
    fn from(e: AnnotateError) -> Self {
        let status = match e {
            AnnotateError::OutOfBounds { .. } | AnnotateError::InvalidStroke(_) | AnnotateError::InvalidSetting(_) => {
                StatusCode::BAD_REQUEST
            }
            AnnotateError::RoadColorUnset | AnnotateError::SeedLabeled { .. } | AnnotateError::NothingToLabel => {
                StatusCode::CONFLICT
            }
            AnnotateError::UnknownInstance(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<RasterError> for ApiError {
    fn from(e: RasterError) -> Self {
        Self::internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Entry {
    image_name: String,
    session: AnnotationSession,
}

/// Sidecar written next to the mask PNG.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct SessionMeta {
    image: String,
    road_color: Option<HsvColor>,
    settings: FillSettings,
    next_id: u32,
}

/// Live sessions keyed by opaque id.
pub struct SessionStore {
    image_root: PathBuf,
    session_dir: PathBuf,
    settings: FillSettings,
    undo_depth: usize,
    sessions: RwLock<HashMap<String, Arc<Mutex<Entry>>>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub image: String,
    pub width: u32,
    pub height: u32,
}

/// Accepts relative paths made of plain components only.
fn safe_relative(name: &str) -> Option<PathBuf> {
    let p = Path::new(name);
    if name.is_empty() || !p.components().all(|c| matches!(c, Component::Normal(_))) {
        return None;
    }
    Some(p.to_path_buf())
}

fn is_session_id(s: &str) -> bool {
    uuid::Uuid::parse_str(s).is_ok()
}

impl SessionStore {
    pub fn new(image_root: impl Into<PathBuf>, session_dir: impl Into<PathBuf>) -> Self {
        Self {
            image_root: image_root.into(),
            session_dir: session_dir.into(),
            settings: FillSettings::default(),
            undo_depth: crate::annotate::DEFAULT_UNDO_DEPTH,
            sessions: RwLock::new(HashMap::new()),
        }
    }

    pub fn from_config(cfg: &PipelineConfig) -> Self {
        let mut store = Self::new(cfg.service.image_root.clone(), cfg.service.session_dir());
        store.settings = cfg.annotate.fill_settings();
        store.undo_depth = cfg.annotate.undo_depth;
        store
    }

    pub fn session_dir(&self) -> &Path {
        &self.session_dir
    }

    fn load_image(&self, name: &str) -> ApiResult<RasterImage> {
        let rel = safe_relative(name).ok_or_else(|| ApiError::not_found(format!("image {name:?} not found")))?;
        let path = self.image_root.join(rel);
        if !path.is_file() {
            return Err(ApiError::not_found(format!("image {name:?} not found")));
        }
        RasterImage::load_png(&path).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
    }

    pub fn create(&self, image_name: &str) -> ApiResult<SessionInfo> {
        let image = self.load_image(image_name)?;
        let session = AnnotationSession::new(Arc::new(image))
            .with_settings(self.settings)?
            .with_undo_depth(self.undo_depth);
        let id = uuid::Uuid::new_v4().to_string();
        let info = SessionInfo {
            session_id: id.clone(),
            image: image_name.to_string(),
            width: session.mask().width(),
            height: session.mask().height(),
        };
        let entry = Entry {
            image_name: image_name.to_string(),
            session,
        };
        self.sessions
            .write()
            .expect("session map poisoned")
            .insert(id, Arc::new(Mutex::new(entry)));
        Ok(info)
    }

    fn entry(&self, id: &str) -> ApiResult<Arc<Mutex<Entry>>> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("session {id} not found")))
    }

    /// Runs `f` with the session locked.
    fn with<T>(&self, id: &str, f: impl FnOnce(&mut Entry) -> ApiResult<T>) -> ApiResult<T> {
        let entry = self.entry(id)?;
        let mut guard = entry.lock().map_err(|_| ApiError::internal("session lock poisoned"))?;
        f(&mut guard)
    }

    pub fn list(&self) -> Vec<SessionInfo> {
        let map = self.sessions.read().expect("session map poisoned");
        let mut out: Vec<SessionInfo> = map
            .iter()
            .filter_map(|(id, e)| {
                let e = e.lock().ok()?;
                Some(SessionInfo {
                    session_id: id.clone(),
                    image: e.image_name.clone(),
                    width: e.session.mask().width(),
                    height: e.session.mask().height(),
                })
            })
            .collect();
        out.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        out
    }

    /// Writes every session as `<id>.png` (16-bit ids) and `<id>.json`.
    pub fn flush_all(&self) -> Result<usize, ServiceError> {
        std::fs::create_dir_all(&self.session_dir)?;
        let map = self.sessions.read().expect("session map poisoned");
        for (id, entry) in map.iter() {
            let e = entry.lock().map_err(|_| ServiceError::Persist {
                id: id.clone(),
                message: "lock poisoned".into(),
            })?;
            let persist_err = |message: String| ServiceError::Persist { id: id.clone(), message };
            let mask = e.session.mask();
            mask.save_ids_png(self.session_dir.join(format!("{id}.png")))
                .map_err(|err| persist_err(err.to_string()))?;
            let meta = SessionMeta {
                image: e.image_name.clone(),
                road_color: e.session.road_color(),
                settings: e.session.settings(),
                next_id: mask.next_id(),
            };
            let json = serde_json::to_string_pretty(&meta).map_err(|err| persist_err(err.to_string()))?;
            std::fs::write(self.session_dir.join(format!("{id}.json")), json)?;
        }
        Ok(map.len())
    }

    /// Restores sessions written by [`SessionStore::flush_all`]. Returns how many were loaded.
    pub fn load_all(&self) -> Result<usize, ServiceError> {
        if !self.session_dir.is_dir() {
            return Ok(0);
        }
        let mut names: Vec<PathBuf> = std::fs::read_dir(&self.session_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        names.sort();
        let mut loaded = 0;
        for meta_path in names {
            let Some(id) = meta_path.file_stem().and_then(|s| s.to_str()).filter(|s| is_session_id(s)) else {
                continue;
            };
            let id = id.to_string();
            let err = |message: String| ServiceError::Persist { id: id.clone(), message };
            let meta: SessionMeta =
                serde_json::from_str(&std::fs::read_to_string(&meta_path)?).map_err(|e| err(e.to_string()))?;
            let image = self.load_image(&meta.image).map_err(|e| err(e.message))?;
            let mut mask = InstanceMask::load_ids_png(self.session_dir.join(format!("{id}.png")))
                .map_err(|e| err(e.to_string()))?;
            mask.set_next_id(meta.next_id);
            let mut session = AnnotationSession::with_mask(Arc::new(image), mask)
                .and_then(|s| s.with_settings(meta.settings))
                .map_err(|e| err(e.to_string()))?
                .with_undo_depth(self.undo_depth);
            session.set_road_hsv(meta.road_color);
            self.sessions.write().expect("session map poisoned").insert(
                id,
                Arc::new(Mutex::new(Entry {
                    image_name: meta.image,
                    session,
                })),
            );
            loaded += 1;
        }
        Ok(loaded)
    }
}

type Shared = Arc<SessionStore>;

/// Runs a blocking session operation off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

#[derive(Deserialize)]
struct CreateRequest {
    image: String,
}

#[derive(Deserialize)]
struct Point {
    x: i64,
    y: i64,
}

#[derive(Deserialize)]
struct MaskQuery {
    format: Option<String>,
}

#[derive(Deserialize)]
struct StrokeRequest {
    kind: StrokeKind,
    points: Vec<(u32, u32)>,
    #[serde(default)]
    radius: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SettingsPatch {
    fill_tolerance: Option<f64>,
    road_margin: Option<f64>,
}

#[derive(Serialize)]
struct FillResponse {
    instance_id: u32,
    pixel_count: usize,
    bounds: PixelBox,
}

async fn healthz() -> &'static str {
    "ok"
}

async fn create_session(State(store): State<Shared>, Json(req): Json<CreateRequest>) -> ApiResult<Json<SessionInfo>> {
    blocking(move || store.create(&req.image)).await.map(Json)
}

async fn list_sessions(State(store): State<Shared>) -> Json<Vec<SessionInfo>> {
    Json(store.list())
}

async fn get_image(State(store): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let image = store.with(&id, |e| Ok(Arc::clone(e.session.image())))?;
    blocking(move || Ok(png(image.to_png_bytes()?))).await
}

/// RGBA palette render with a transparent background.
fn palette_rgba(mask: &InstanceMask) -> Result<Vec<u8>, RasterError> {
    let rgb = mask.to_palette_raster();
    let mut data = Vec::with_capacity(mask.labels().len() * 4);
    for (px, &l) in rgb.data().chunks_exact(3).zip(mask.labels()) {
        data.extend_from_slice(px);
        data.push(if l == 0 { 0 } else { 255 });
    }
    RasterImage::new(mask.width(), mask.height(), 4, data)?.to_png_bytes()
}

async fn get_mask(
    State(store): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<MaskQuery>,
) -> ApiResult<Response> {
    let ids = match q.format.as_deref() {
        None | Some("palette") => false,
        Some("ids") => true,
        Some(other) => return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unknown mask format {other:?}"))),
    };
    let mask = store.with(&id, |e| Ok(e.session.mask().clone()))?;
    blocking(move || {
        let bytes = if ids { mask.ids_png_bytes()? } else { palette_rgba(&mask)? };
        Ok(png(bytes))
    })
    .await
}

async fn road_color(
    State(store): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(p): Json<Point>,
) -> ApiResult<Json<HsvColor>> {
    blocking(move || store.with(&id, |e| Ok(e.session.set_road_color(p.x, p.y)?)))
        .await
        .map(Json)
}

async fn floodfill(
    State(store): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(p): Json<Point>,
) -> ApiResult<Json<FillResponse>> {
    let l = blocking(move || store.with(&id, |e| Ok(e.session.flood_fill(p.x, p.y)?))).await?;
    Ok(Json(FillResponse {
        instance_id: l.instance_id,
        pixel_count: l.pixels.len(),
        bounds: l.bounds,
    }))
}

async fn stroke(
    State(store): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<StrokeRequest>,
) -> ApiResult<Json<serde_json::Value>> {
    let stroke = Stroke {
        kind: req.kind,
        points: req.points,
        brush_radius: req.radius,
    };
    let l = blocking(move || store.with(&id, |e| Ok(e.session.apply_stroke(&stroke)?))).await?;
    Ok(Json(serde_json::json!({ "instance_id": l.instance_id, "pixel_count": l.pixels.len() })))
}

async fn undo(State(store): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let reverted = blocking(move || store.with(&id, |e| Ok(e.session.undo()))).await?;
    Ok(Json(serde_json::json!({ "reverted": reverted })))
}

async fn erase(
    State(store): State<Shared>,
    UrlPath((id, iid)): UrlPath<(String, u32)>,
) -> ApiResult<Json<serde_json::Value>> {
    let cleared = blocking(move || store.with(&id, |e| Ok(e.session.erase_instance(iid)?))).await?;
    Ok(Json(serde_json::json!({ "cleared": cleared })))
}

async fn boxes(State(store): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let text = store.with(&id, |e| Ok(boxes_to_jsonl(&e.session.boxes())))?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from(text)).into_response())
}

async fn set_config(
    State(store): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(patch): Json<SettingsPatch>,
) -> ApiResult<Json<FillSettings>> {
    store
        .with(&id, |e| {
            let mut s = e.session.settings();
            if let Some(v) = patch.fill_tolerance {
                s.fill_tolerance = v;
            }
            if let Some(v) = patch.road_margin {
                s.road_margin = v;
            }
            e.session.set_settings(s)?;
            Ok(s)
        })
        .map(Json)
}

/// The HTTP API, plus static files from `ui_dir` for every other path.
pub fn router(store: Arc<SessionStore>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}/image", get(get_image))
        .route("/sessions/{id}/mask", get(get_mask))
        .route("/sessions/{id}/road-color", post(road_color))
        .route("/sessions/{id}/floodfill", post(floodfill))
        .route("/sessions/{id}/stroke", post(stroke))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/instances/{iid}", delete(erase))
        .route("/sessions/{id}/boxes", get(boxes))
        .route("/sessions/{id}/config", post(set_config))
        .with_state(store);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Checks the image root, restores saved sessions and binds `addr`.
pub async fn bind(cfg: &PipelineConfig, addr: SocketAddr) -> Result<(tokio::net::TcpListener, Arc<SessionStore>), ServiceError> {
    let root = &cfg.service.image_root;
    std::fs::read_dir(root).map_err(|source| ServiceError::ImageRoot {
        path: root.clone(),
        source,
    })?;
    let store = Arc::new(SessionStore::from_config(cfg));
    store.load_all()?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServiceError::Bind { addr, source })?;
    Ok((listener, store))
}

/// Serves until `shutdown` resolves, then writes every session to disk.
pub async fn serve(
    cfg: &PipelineConfig,
    addr: SocketAddr,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let (listener, store) = bind(cfg, addr).await?;
    serve_on(listener, store, cfg.service.ui_dir.as_deref(), shutdown).await
}

pub async fn serve_on(
    listener: tokio::net::TcpListener,
    store: Arc<SessionStore>,
    ui_dir: Option<&Path>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let app = router(Arc::clone(&store), ui_dir);
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    store.flush_all()?;
    Ok(())
}
