//! HTTP API behind the annotation UI.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/parts` | part classes |
//! | GET | `/api/prototypes?part=` | ranked prototypes with member boxes |
//! | GET | `/api/patches?prototype=` | members of one prototype |
//! | POST | `/api/labels` | store a label submission |
//! | GET | `/api/progress?part=` | labeling progress for a part |
//! | GET | `/api/image/{id}` | the image file named by the manifest |
//!
//! [`segment_router`] exposes a segmentation backend as `POST /segment`.
//!
//! Labels go to a JSON-lines [`LabelStore`]; writes are serialized.

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use crate::dataset::Manifest;
use crate::geometry::PixelBox;
use crate::guidance::{SegmentationBackend, SegmentationRequest, SegmentationResponse};
use crate::patchgrid::{build_grid, PatchGrid};
use crate::prototypes::{rank_prototypes, AnnotationRecord, AnnotationSource, LabelStore, Prototype};

/// Environment variable that overrides the label store path.
pub const STORE_ENV: &str = "PARTGUIDE_STORE";

pub struct AppState {
    pub manifest: Manifest,
    pub prototypes: Vec<Prototype>,
    grids: HashMap<String, PatchGrid>,
    store: LabelStore,
    writer: Mutex<()>,
}

impl AppState {
    /// Patch boxes are recomputed from the manifest with the grid settings
    /// the prototypes were built with.
    pub fn new(
        manifest: Manifest,
        prototypes: Vec<Prototype>,
        divisor: u32,
        overlap: f64,
        store: LabelStore,
    ) -> Result<Self, crate::Error> {
        let mut grids = HashMap::new();
        for img in &manifest.images {
            grids.insert(img.id.clone(), build_grid(&img.id, img.width, img.height, divisor, overlap)?);
        }
        Ok(Self { manifest, prototypes, grids, store, writer: Mutex::new(()) })
    }

    pub fn store(&self) -> &LabelStore {
        &self.store
    }

    fn member_view(&self, proto: &Prototype) -> Vec<MemberView> {
        proto
            .members
            .iter()
            .enumerate()
            .map(|(i, key)| MemberView {
                member: i as u32,
                image_id: key.image_id.clone(),
                patch_index: key.index,
                bbox: self.grids.get(&key.image_id).and_then(|g| g.patch(key.index)).map(|p| p.bbox),
                thumbnail: format!("/api/image/{}", key.image_id),
            })
            .collect()
    }
}

/// Label store path: the environment override if set, else `default`.
pub fn store_path(default: PathBuf) -> PathBuf {
    std::env::var_os(STORE_ENV).map(PathBuf::from).unwrap_or(default)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberView {
    pub member: u32,
    pub image_id: String,
    pub patch_index: u32,
    #[serde(rename = "box")]
    pub bbox: Option<PixelBox>,
    pub thumbnail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeView {
    pub id: u32,
    pub rank: usize,
    pub score: f64,
    pub members: Vec<MemberView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub prototype_id: u32,
    pub part_class: String,
    pub bulk_label: bool,
    #[serde(default)]
    pub exceptions: Vec<u32>,
    #[serde(default)]
    pub annotator: Option<String>,
    #[serde(default)]
    pub timestamp: Option<String>,
}

impl LabelSubmission {
    pub fn into_record(self) -> AnnotationRecord {
        let mut r =
            AnnotationRecord::new(self.prototype_id, &self.part_class, self.bulk_label, self.exceptions, AnnotationSource::Human);
        r.annotator = self.annotator;
        r.timestamp = self.timestamp;
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub part: String,
    pub done: usize,
    pub total: usize,
    /// Rank of the first prototype not yet labeled; equals `total` when finished.
    pub cursor: usize,
    pub completed: Vec<u32>,
    pub clicks: u64,
}

#[derive(Debug)]
struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn not_found(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, msg.into())
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/parts", get(parts))
        .route("/api/prototypes", get(prototypes))
        .route("/api/patches", get(patches))
        .route("/api/labels", post(labels))
        .route("/api/progress", get(progress))
        .route("/api/image/{id}", get(image))
        .with_state(state)
}

/// `POST /segment` in front of a segmentation backend, for backends reached
/// over HTTP. Backend failures are answered with the protocol's `error` field.
pub fn segment_router(backend: Arc<dyn SegmentationBackend>) -> Router {
    Router::new().route(
        "/segment",
        post(move |Json(req): Json<SegmentationRequest>| {
            let backend = backend.clone();
            async move {
                let id = req.id;
                tokio::task::spawn_blocking(move || backend.segment(&req))
                    .await
                    .map_err(internal)?
                    .or_else(|e| Ok::<_, ApiError>(SegmentationResponse::failure(id, e.to_string())))
                    .map(Json)
            }
        }),
    )
}

/// Binds and serves until Ctrl-C.
pub async fn serve(state: Shared, addr: std::net::SocketAddr) -> std::io::Result<()> {
    serve_router(router(state), addr).await
}

/// Serves any router until Ctrl-C.
pub async fn serve_router(app: Router, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn parts(State(s): State<Shared>) -> Json<Vec<String>> {
    Json(s.manifest.part_classes.clone())
}

#[derive(Deserialize)]
struct PartQuery {
    part: Option<String>,
}

fn require_part(s: &AppState, q: PartQuery) -> Result<String, ApiError> {
    let part = q.part.ok_or_else(|| bad_request("missing 'part' query parameter"))?;
    if !s.manifest.has_class(&part) {
        return Err(not_found(format!("unknown part class '{part}'")));
    }
    Ok(part)
}

async fn prototypes(State(s): State<Shared>, Query(q): Query<PartQuery>) -> Result<Json<Vec<PrototypeView>>, ApiError> {
    let part = require_part(&s, q)?;
    let ranked = rank_prototypes(&s.prototypes, &part).map_err(|e| not_found(e.to_string()))?;
    Ok(Json(
        ranked
            .into_iter()
            .enumerate()
            .map(|(rank, p)| PrototypeView {
                id: p.id,
                rank,
                score: p.score_per_class[&part],
                members: s.member_view(p),
            })
            .collect(),
    ))
}

#[derive(Deserialize)]
struct PrototypeQuery {
    prototype: Option<u32>,
}

async fn patches(State(s): State<Shared>, Query(q): Query<PrototypeQuery>) -> Result<Json<Vec<MemberView>>, ApiError> {
    let id = q.prototype.ok_or_else(|| bad_request("missing or invalid 'prototype' query parameter"))?;
    let proto = s
        .prototypes
        .iter()
        .find(|p| p.id == id)
        .ok_or_else(|| not_found(format!("no prototype {id}")))?;
    Ok(Json(s.member_view(proto)))
}

async fn labels(
    State(s): State<Shared>,
    Json(sub): Json<LabelSubmission>,
) -> Result<(StatusCode, Json<AnnotationRecord>), ApiError> {
    if !s.manifest.has_class(&sub.part_class) {
        return Err(not_found(format!("unknown part class '{}'", sub.part_class)));
    }
    let proto = s
        .prototypes
        .iter()
        .find(|p| p.id == sub.prototype_id)
        .ok_or_else(|| not_found(format!("no prototype {}", sub.prototype_id)))?;
    let record = sub.into_record();
    record.validate(proto).map_err(|e| bad_request(e.to_string()))?;
    let state = s.clone();
    let stored = record.clone();
    tokio::task::spawn_blocking(move || {
        let _guard = state.writer.lock().unwrap_or_else(|e| e.into_inner());
        state.store.append(&stored)
    })
    .await
    .map_err(internal)?
    .map_err(internal)?;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn progress(State(s): State<Shared>, Query(q): Query<PartQuery>) -> Result<Json<Progress>, ApiError> {
    let part = require_part(&s, q)?;
    let state = s.clone();
    let latest = tokio::task::spawn_blocking(move || state.store.latest())
        .await
        .map_err(internal)?
        .map_err(internal)?;
    let completed: BTreeSet<u32> = latest.keys().filter(|(_, c)| *c == part).map(|(id, _)| *id).collect();
    let clicks = latest.values().filter(|r| r.part_class == part).map(|r| r.clicks as u64).sum();
    let total = s.prototypes.len();
    let cursor = match rank_prototypes(&s.prototypes, &part) {
        Ok(ranked) => ranked.iter().position(|p| !completed.contains(&p.id)).unwrap_or(ranked.len()),
        Err(_) => 0,
    };
    Ok(Json(Progress {
        part,
        done: completed.len(),
        total,
        cursor,
        completed: completed.into_iter().collect(),
        clicks,
    }))
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("pgm") => "image/x-portable-graymap",
        Some("ppm") => "image/x-portable-pixmap",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

async fn image(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let entry = s.manifest.image(&id).ok_or_else(|| not_found(format!("no image '{id}'")))?;
    let path = entry.pixel_source.clone();
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| not_found(format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}
