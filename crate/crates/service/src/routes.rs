use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::Value;

use crate::error::{Result, ServiceError};
use crate::handlers::{handle_query, handle_segment, QueryRequest, SegmentRequest};
use crate::session::{Inventory, LoadRequest, SessionStore};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    pub client: reqwest::Client,
}

impl AppState {
    pub fn new(store: SessionStore) -> Self {
        Self {
            store: Arc::new(store),
            client: reqwest::Client::new(),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/session", get(session))
        .route("/load", post(load))
        .route("/query", post(query))
        .route("/segment", post(segment))
        .route("/image/{id}", get(image))
        .with_state(state)
}

async fn session(State(state): State<AppState>) -> Json<Inventory> {
    Json(state.store.snapshot().inventory())
}

async fn load(State(state): State<AppState>, Json(req): Json<LoadRequest>) -> Result<Json<Inventory>> {
    tracing::info!(?req, "load");
    Ok(Json(state.store.load(req).await?))
}

async fn query(State(state): State<AppState>, Json(req): Json<QueryRequest>) -> Result<Json<Value>> {
    let session = state.store.snapshot();
    let artifact = handle_query(&session, &req, &state.client).await?;
    Ok(Json(artifact.to_json()))
}

async fn segment(State(state): State<AppState>, Json(req): Json<SegmentRequest>) -> Result<Json<Value>> {
    let session = state.store.snapshot();
    let artifact = tokio::task::spawn_blocking(move || handle_segment(&session, &req))
        .await
        .map_err(|e| ServiceError::BadRequest(format!("segment task failed: {e}")))??;
    Ok(Json(artifact.to_json()))
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("pgm" | "ppm" | "pnm") => "image/x-portable-anymap",
        Some("bmp") => "image/bmp",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

async fn image(State(state): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse> {
    let session = state.store.snapshot();
    let path = session
        .volume(&id)?
        .image
        .clone()
        .ok_or_else(|| ServiceError::NoDisplayImage(id.clone()))?;
    let bytes = tokio::fs::read(&path).await.map_err(dve_core::Error::from)?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes))
}
