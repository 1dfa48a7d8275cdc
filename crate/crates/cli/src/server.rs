//! HTTP service for interactive click-and-grasp.
//!
//! - `GET /api/scenes`: JSON array of scene ids.
//! - `GET /api/scene/{id}`: little-endian `u32` point count then `f32` xyz
//!   triplets; image size and intrinsics travel in `x-image-width`,
//!   `x-image-height` and `x-intrinsics` headers.
//! - `POST /api/grasp`: `{scene_id, mode, pixel | bbox, k, radius}` to grasp
//!   JSON. 400 on a bad payload, 404 on an unknown scene, 422 when the
//!   guidance yields no region.

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use flexlog::cloud::SceneCloud;
use flexlog::guidance::{GuidanceError, Target};
use flexlog::pipeline::{Detector, GraspOutput, Guidance, PipelineError};
use flexlog::scene::{list_scene_dirs, load_scene};

use crate::config::Resolved;
use crate::CliError;

pub struct ServedScene {
    pub cloud: SceneCloud,
    payload: Bytes,
}

impl ServedScene {
    pub fn new(cloud: SceneCloud) -> Self {
        let pts = cloud.points();
        let mut buf = Vec::with_capacity(4 + 12 * pts.len());
        buf.extend_from_slice(&(pts.len() as u32).to_le_bytes());
        for p in pts {
            for c in p.iter() {
                buf.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        ServedScene {
            cloud,
            payload: Bytes::from(buf),
        }
    }
}

/// Read-only service state.
pub struct AppState {
    pub scenes: BTreeMap<String, ServedScene>,
    pub detector: Detector,
}

impl AppState {
    pub fn load(root: &Path, detector: Detector) -> anyhow::Result<Self> {
        let mut scenes = BTreeMap::new();
        for dir in list_scene_dirs(root)? {
            let (scene, _) = load_scene(&dir).with_context(|| format!("loading {}", dir.display()))?;
            let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            scenes.insert(id, ServedScene::new(scene.cloud()?));
        }
        Ok(AppState { scenes, detector })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspRequest {
    pub scene_id: String,
    pub mode: String,
    pub pixel: Option<[u32; 2]>,
    pub bbox: Option<[u32; 4]>,
    pub k: Option<usize>,
    pub radius: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RegionInfo {
    pub center: [f64; 3],
    pub pixel: Option<[u32; 2]>,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GraspResponse {
    pub scene_id: String,
    pub mode: String,
    pub grasps: Vec<GraspOutput>,
    pub regions: Vec<RegionInfo>,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

async fn list_scenes(State(state): State<Arc<AppState>>) -> Json<Vec<String>> {
    Json(state.scenes.keys().cloned().collect())
}

async fn get_scene(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(s) = state.scenes.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown scene {id}"));
    };
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
    headers.insert("x-image-width", HeaderValue::from(s.cloud.width()));
    headers.insert("x-image-height", HeaderValue::from(s.cloud.height()));
    let intr = serde_json::to_string(&s.cloud.intrinsics).expect("serialisable");
    headers.insert("x-intrinsics", HeaderValue::from_str(&intr).expect("ascii json"));
    (headers, s.payload.clone()).into_response()
}

fn run_grasp(state: &AppState, req: GraspRequest) -> Response {
    let Some(scene) = state.scenes.get(&req.scene_id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown scene {}", req.scene_id));
    };
    let guidance = match (req.mode.as_str(), req.pixel, req.bbox) {
        ("click", Some([u, v]), None) => Guidance::Target(Target::Click { u, v }),
        ("bbox", None, Some([u0, v0, u1, v1])) => Guidance::Target(Target::BBox { u0, v0, u1, v1 }),
        ("grid", None, None) => Guidance::Grid,
        ("click", ..) => return error(StatusCode::BAD_REQUEST, "click mode needs exactly a pixel"),
        ("bbox", ..) => return error(StatusCode::BAD_REQUEST, "bbox mode needs exactly a bbox"),
        ("grid", ..) => return error(StatusCode::BAD_REQUEST, "grid mode takes no pixel or bbox"),
        (m, ..) => return error(StatusCode::BAD_REQUEST, format!("unsupported mode {m:?}")),
    };
    let mut cfg = state.detector.config.clone();
    if let Some(k) = req.k {
        if !(1..=1024).contains(&k) {
            return error(StatusCode::BAD_REQUEST, "k must lie in [1, 1024]");
        }
        cfg.k = k;
    }
    if let Some(r) = req.radius {
        if !(r > 0.0 && r <= 0.5) {
            return error(StatusCode::BAD_REQUEST, "radius must lie in (0, 0.5]");
        }
        cfg.radius = r;
    }
    match state.detector.detect_with(&scene.cloud, &guidance, &cfg) {
        Ok(det) => Json(GraspResponse {
            scene_id: req.scene_id,
            mode: req.mode,
            grasps: det.outputs(),
            regions: det
                .regions
                .iter()
                .map(|(f, s)| RegionInfo {
                    center: f.center.into(),
                    pixel: f.source_pixel.map(|(u, v)| [u, v]),
                    score: *s,
                })
                .collect(),
        })
        .into_response(),
        Err(e @ (PipelineError::NoRegions | PipelineError::Guidance(GuidanceError::EmptyTarget))) => {
            error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
        }
        Err(e @ PipelineError::Guidance(GuidanceError::InvalidTarget(_))) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn post_grasp(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: GraspRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid payload: {e}")),
    };
    match tokio::task::spawn_blocking(move || run_grasp(&state, req)).await {
        Ok(r) => r,
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/scenes", get(list_scenes))
        .route("/api/scene/{id}", get(get_scene))
        .route("/api/grasp", post(post_grasp))
        .with_state(state)
}

pub fn serve_cmd(r: &Resolved) -> Result<(), CliError> {
    let root = r.opts.scene.as_ref().ok_or_else(|| anyhow::anyhow!("--scene is required"))?;
    let ckpt = r.opts.checkpoint.as_ref().ok_or_else(|| anyhow::anyhow!("--checkpoint is required"))?;
    let model = flexlog::model::checkpoint::load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let state = AppState::load(root, Detector::new(model, r.detect.clone()))?;
    if state.scenes.is_empty() {
        return Err(CliError::NoScenes);
    }
    let addr = r.opts.serve.clone().unwrap_or_else(|| "127.0.0.1:8080".to_string());
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        log::info!("serving {} scenes on {addr}", state.scenes.len());
        axum::serve(listener, router(Arc::new(state))).await.context("server failed")
    })?;
    Ok(())
}
