//! HTTP inference service over one checkpoint and its optional control maps.
//!
//! Endpoints: `GET /health`, `GET /model-info`, `POST /embed`,
//! `POST /generate`, `POST /edit`. Images travel as PNG, either as
//! multipart file fields or base64 strings inside a JSON body. Every error
//! is a JSON `{code, message}` body.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, State};
use axum::http::{header, HeaderMap, Request, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use x2face::control::{pose_drive_vector, ControlMaps};
use x2face::editing::{apply_overlay, OverlayRgba};
use x2face::imageio::{decode_png, encode_png, resize_square};
use x2face::networks::{
    drive_decode, drive_encode, embed_multi, load_checkpoint, read_checkpoint_meta, DrivingNetwork, DrivingVector,
    EmbeddedFace, EmbeddingNetwork, FaceFrame,
};

pub mod store;

pub use store::{EmbeddedStore, Entry, DEFAULT_TTL};

/// Total request body limit.
pub const DEFAULT_BODY_LIMIT: usize = 8 << 20;

/// Immutable after startup.
pub struct Model {
    pub embedding: EmbeddingNetwork,
    pub driving: DrivingNetwork,
    pub training_meta: Value,
    pub maps: Option<ControlMaps>,
}

impl Model {
    pub fn load(checkpoint: &Path, maps_dir: Option<&Path>) -> x2face::Result<Self> {
        let ck = load_checkpoint(checkpoint)?;
        let (_, _, manifest) = read_checkpoint_meta(checkpoint)?;
        let maps = maps_dir.map(ControlMaps::load_dir).transpose()?;
        Ok(Self {
            embedding: ck.embedding,
            driving: ck.driving,
            training_meta: manifest.get("training_meta").cloned().unwrap_or(Value::Null),
            maps,
        })
    }

    pub fn resolution(&self) -> usize {
        self.embedding.config().resolution
    }

    pub fn pose_ready(&self) -> bool {
        self.maps.as_ref().is_some_and(|m| m.pose_maps().is_ok())
    }
}

pub struct ServiceConfig {
    pub ttl: Option<Duration>,
    pub body_limit: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            ttl: Some(DEFAULT_TTL),
            body_limit: DEFAULT_BODY_LIMIT,
        }
    }
}

pub struct AppState {
    pub model: Model,
    pub store: EmbeddedStore,
}

pub fn router(model: Model, cfg: ServiceConfig) -> Router {
    let state = Arc::new(AppState {
        model,
        store: EmbeddedStore::new(cfg.ttl),
    });
    Router::new()
        .route("/health", get(health))
        .route("/model-info", get(model_info))
        .route("/embed", post(embed))
        .route("/generate", post(generate))
        .route("/edit", post(edit))
        .layer(DefaultBodyLimit::max(cfg.body_limit))
        .with_state(state)
}

pub async fn serve(model: Model, cfg: ServiceConfig, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(model, cfg)).await
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.into(),
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn unknown_id(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_id", format!("no embedded face with id `{id}`"))
    }
}

impl From<x2face::Error> for ApiError {
    fn from(e: x2face::Error) -> Self {
        use x2face::Error as E;
        let status = match e {
            E::Unfitted(_) => StatusCode::CONFLICT,
            E::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn health(State(s): State<Arc<AppState>>) -> Json<Value> {
    let m = &s.model;
    Json(json!({
        "status": "ok",
        "model": {
            "resolution": m.resolution(),
            "vector_dim": m.driving.config().driving_vector_dim,
        },
        "maps_loaded": m.maps.is_some(),
    }))
}

async fn model_info(State(s): State<Arc<AppState>>) -> Json<Value> {
    Json(s.model.training_meta.clone())
}

/// A request body: JSON, or multipart parts as (name, bytes).
enum Upload {
    Json(Value),
    Parts(Vec<(String, Bytes)>),
}

impl Upload {
    /// The whole JSON body, or the multipart part `field` parsed as JSON.
    fn json<T: serde::de::DeserializeOwned>(&self, field: &str) -> ApiResult<T> {
        let raw: Value = match self {
            Upload::Json(v) => v.clone(),
            Upload::Parts(parts) => {
                let text = parts
                    .iter()
                    .find(|(n, _)| n == field)
                    .ok_or_else(|| ApiError::bad_request(format!("missing `{field}` part")))?;
                serde_json::from_slice(&text.1).map_err(|e| ApiError::bad_request(format!("`{field}`: {e}")))?
            }
        };
        serde_json::from_value(raw).map_err(|e| ApiError::bad_request(e.to_string()))
    }

    fn text(&self, field: &str) -> ApiResult<String> {
        match self {
            Upload::Json(v) => v.get(field).and_then(Value::as_str).map(str::to_string),
            Upload::Parts(parts) => parts
                .iter()
                .find(|(n, _)| n == field)
                .and_then(|(_, b)| std::str::from_utf8(b).ok().map(str::to_string)),
        }
        .ok_or_else(|| ApiError::bad_request(format!("missing `{field}`")))
    }

    /// Image bytes: multipart parts named `field`, or base64 strings under
    /// the JSON key `field` (a string or an array of strings).
    fn images(&self, field: &str, json_root: Option<&Value>) -> ApiResult<Vec<Vec<u8>>> {
        match self {
            Upload::Parts(parts) => Ok(parts.iter().filter(|(n, _)| n == field).map(|(_, b)| b.to_vec()).collect()),
            Upload::Json(v) => {
                let v = json_root.unwrap_or(v);
                let strings: Vec<&str> = match v.get(field) {
                    None | Some(Value::Null) => Vec::new(),
                    Some(Value::String(s)) => vec![s.as_str()],
                    Some(Value::Array(a)) => a
                        .iter()
                        .map(|x| x.as_str().ok_or_else(|| ApiError::bad_request(format!("`{field}` must hold strings"))))
                        .collect::<ApiResult<_>>()?,
                    Some(_) => return Err(ApiError::bad_request(format!("`{field}` must be base64 text"))),
                };
                strings
                    .into_iter()
                    .map(|s| {
                        B64.decode(s.trim())
                            .map_err(|e| ApiError::bad_request(format!("`{field}` is not base64: {e}")))
                    })
                    .collect()
            }
        }
    }
}

async fn read_upload(headers: &HeaderMap, body: Result<Bytes, BytesRejection>) -> ApiResult<Upload> {
    let body = body.map_err(|r| {
        let status = r.status();
        let code = if status == StatusCode::PAYLOAD_TOO_LARGE {
            "payload_too_large"
        } else {
            "bad_request"
        };
        ApiError::new(status, code, r.body_text())
    })?;
    let ct = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_string();
    if ct.starts_with("multipart/form-data") {
        let req = Request::builder()
            .header(header::CONTENT_TYPE, ct)
            .body(Body::from(body))
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let mut mp = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        let mut parts = Vec::new();
        while let Some(field) = mp.next_field().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
            let name = field.name().unwrap_or_default().to_string();
            let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
            parts.push((name, bytes));
        }
        Ok(Upload::Parts(parts))
    } else {
        serde_json::from_slice(&body)
            .map(Upload::Json)
            .map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
    }
}

/// Runs model work off the async executor.
async fn blocking<T: Send + 'static>(
    s: Arc<AppState>,
    f: impl FnOnce(&AppState) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(move || f(&s))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn decode_frame(bytes: &[u8], resolution: usize) -> ApiResult<FaceFrame> {
    let t = decode_png(bytes, false).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_image", e.to_string()))?;
    Ok(FaceFrame::new(resize_square(&t, resolution))?)
}

fn png_b64(t: &x2face::Tensor<f32>) -> ApiResult<String> {
    Ok(B64.encode(encode_png(t)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embedded_id: String,
    /// Base64 PNG of the embedded face.
    pub embedded_png: String,
}

async fn embed(State(s): State<Arc<AppState>>, headers: HeaderMap, body: Result<Bytes, BytesRejection>) -> ApiResult<Json<EmbedResponse>> {
    let upload = read_upload(&headers, body).await?;
    let images = upload.images("images", None)?;
    if images.is_empty() {
        return Err(ApiError::bad_request("no source images"));
    }
    blocking(s, move |s| {
        let res = s.model.resolution();
        let frames = images.iter().map(|b| decode_frame(b, res)).collect::<ApiResult<Vec<_>>>()?;
        let embedded = embed_multi(&s.model.embedding, &frames)?;
        // The first source is the designated self frame.
        let self_vector = drive_encode(&s.model.driving, &frames[0])?.0;
        let embedded_png = png_b64(embedded.tensor())?;
        let embedded_id = s.store.insert(Entry { embedded, self_vector });
        Ok(Json(EmbedResponse {
            embedded_id,
            embedded_png,
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct GenerateRequest {
    embedded_id: String,
    mode: String,
    #[serde(default)]
    payload: Value,
}

fn number_list(payload: &Value, key: &str) -> ApiResult<Vec<f64>> {
    let v = payload.get(key).unwrap_or(payload);
    serde_json::from_value(v.clone()).map_err(|_| ApiError::bad_request(format!("payload `{key}` must be a list of numbers")))
}

async fn generate(State(s): State<Arc<AppState>>, headers: HeaderMap, body: Result<Bytes, BytesRejection>) -> ApiResult<Response> {
    let upload = read_upload(&headers, body).await?;
    let req: GenerateRequest = upload.json("request")?;
    let image = match req.mode.as_str() {
        "driving-image" => {
            let mut imgs = upload.images("image", Some(&req.payload))?;
            if imgs.len() != 1 {
                return Err(ApiError::bad_request("driving-image mode needs exactly one `image`"));
            }
            Some(imgs.remove(0))
        }
        "pose" | "vector-delta" => None,
        other => return Err(ApiError::bad_request(format!("unknown mode `{other}`"))),
    };
    let png = blocking(s, move |s| {
        let entry = s.store.get(&req.embedded_id).ok_or_else(|| ApiError::unknown_id(&req.embedded_id))?;
        let m = &s.model;
        let v = match (req.mode.as_str(), image) {
            ("driving-image", Some(bytes)) => drive_encode(&m.driving, &decode_frame(&bytes, m.resolution())?)?,
            ("pose", _) => {
                let maps = m
                    .maps
                    .as_ref()
                    .filter(|_| m.pose_ready())
                    .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "maps_not_loaded", "pose mode needs fitted pose maps"))?;
                let (vp, pv) = maps.pose_maps()?;
                let pose = number_list(&req.payload, "pose")?;
                let v_source: Vec<f64> = entry.self_vector.iter().map(|&x| x as f64).collect();
                to_vector(&pose_drive_vector(&v_source, vp, pv, &pose)?)
            }
            _ => {
                let delta = number_list(&req.payload, "delta")?;
                if delta.len() != entry.self_vector.len() {
                    return Err(x2face::Error::DimMismatch {
                        expected: entry.self_vector.len(),
                        got: delta.len(),
                    }
                    .into());
                }
                let v: Vec<f64> = entry.self_vector.iter().zip(&delta).map(|(&a, d)| a as f64 + d).collect();
                to_vector(&v)
            }
        };
        if v.0.iter().any(|x| !x.is_finite()) {
            return Err(x2face::Error::NonFinite("driving vector".into()).into());
        }
        let (_, frame) = drive_decode(&m.driving, &v, &entry.embedded)?;
        Ok(encode_png(frame.tensor())?)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

fn to_vector(v: &[f64]) -> DrivingVector {
    DrivingVector(v.iter().map(|&x| x as f32).collect())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditResponse {
    pub embedded_id: String,
    /// Base64 PNG of the edited embedded face.
    pub preview_png: String,
}

async fn edit(State(s): State<Arc<AppState>>, headers: HeaderMap, body: Result<Bytes, BytesRejection>) -> ApiResult<Json<EditResponse>> {
    let upload = read_upload(&headers, body).await?;
    let id = upload.text("embedded_id")?;
    let mut overlays = upload.images("overlay", None)?;
    if overlays.len() != 1 {
        return Err(ApiError::bad_request("exactly one `overlay` image is required"));
    }
    let bytes = overlays.remove(0);
    blocking(s, move |s| {
        let entry = s.store.get(&id).ok_or_else(|| ApiError::unknown_id(&id))?;
        let t = decode_png(&bytes, true).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_image", e.to_string()))?;
        let edited: EmbeddedFace = apply_overlay(&entry.embedded, &OverlayRgba::new(t)?)?;
        let preview_png = png_b64(edited.tensor())?;
        let embedded_id = s.store.insert(Entry {
            embedded: edited,
            self_vector: entry.self_vector.clone(),
        });
        Ok(Json(EditResponse {
            embedded_id,
            preview_png,
        }))
    })
    .await
}
