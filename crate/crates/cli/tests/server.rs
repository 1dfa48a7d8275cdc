use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use tower::ServiceExt;

use flexlog::datagen::{synthesize_corpus, SynthConfig};
use flexlog::model::{LocalGraspModel, ModelConfig};
use flexlog::pipeline::{DetectConfig, Detector};
use flexlog::scene::save_scene;
use flexlog_cli::server::{router, AppState, GraspResponse};

fn scene_root() -> &'static PathBuf {
    static ROOT: OnceLock<PathBuf> = OnceLock::new();
    ROOT.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let scenes = synthesize_corpus(2, 17, &SynthConfig::default()).unwrap();
        for (i, (s, l)) in scenes.iter().enumerate() {
            let mut s = s.clone();
            if i == 1 {
                s.depth.set(3, 4, 0);
            }
            save_scene(&root.join(format!("s{i}")), &s, l).unwrap();
        }
        root
    })
}

fn app() -> Router {
    let mut cfg = ModelConfig::small();
    cfg.n_points = 64;
    let model = LocalGraspModel::init(&cfg, 4).unwrap();
    let state = AppState::load(scene_root(), Detector::new(model, DetectConfig::default())).unwrap();
    router(Arc::new(state))
}

async fn call(app: Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

fn grasp(body: &str) -> Request<Body> {
    Request::post("/api/grasp")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

#[tokio::test]
async fn lists_scenes() {
    let (status, _, body) = call(app(), Request::get("/api/scenes").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<String> = serde_json::from_slice(&body).unwrap();
    assert_eq!(ids, vec!["s0", "s1"]);
}

#[tokio::test]
async fn scene_payload_is_count_then_xyz() {
    let (status, headers, body) = call(app(), Request::get("/api/scene/s0").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let n = u32::from_le_bytes(body[..4].try_into().unwrap()) as usize;
    assert!(n > 0);
    assert_eq!(body.len(), 4 + 12 * n);
    let z = f32::from_le_bytes(body[12..16].try_into().unwrap());
    assert!(z > 0.0);
    assert_eq!(headers["x-image-width"], "256");
    assert_eq!(headers["x-image-height"], "200");
    let intr: serde_json::Value = serde_json::from_str(headers["x-intrinsics"].to_str().unwrap()).unwrap();
    assert_eq!(intr["fx"], 220.0);

    let (status, _, _) = call(app(), Request::get("/api/scene/nope").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn click_grasps_are_local_and_deterministic() {
    let body = r#"{"scene_id":"s0","mode":"click","pixel":[128,100],"k":8,"radius":0.08}"#;
    let (status, _, a) = call(app(), grasp(body)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&a));
    let (_, _, b) = call(app(), grasp(body)).await;
    assert_eq!(a, b);
    let resp: GraspResponse = serde_json::from_slice(&a).unwrap();
    assert_eq!(resp.mode, "click");
    assert_eq!(resp.regions.len(), 1);
    assert_eq!(resp.regions[0].pixel, Some([128, 100]));
    let origin = resp.regions[0].center;
    for g in &resp.grasps {
        let c = g.grasp.t;
        let d = ((c.x - origin[0]).powi(2) + (c.y - origin[1]).powi(2) + (c.z - origin[2]).powi(2)).sqrt();
        assert!(d <= 0.08 + 0.02, "grasp {d} m from the click");
    }
}

#[tokio::test]
async fn bbox_and_grid_modes() {
    let (status, _, body) =
        call(app(), grasp(r#"{"scene_id":"s0","mode":"bbox","bbox":[100,80,160,120],"k":4}"#)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let (status, _, body) = call(app(), grasp(r#"{"scene_id":"s0","mode":"grid","k":6}"#)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: GraspResponse = serde_json::from_slice(&body).unwrap();
    assert!(resp.regions.len() <= 6);
}

#[tokio::test]
async fn error_statuses() {
    let cases = [
        ("not json", StatusCode::BAD_REQUEST),
        (r#"{"scene_id":"s0","mode":"click"}"#, StatusCode::BAD_REQUEST),
        (r#"{"scene_id":"s0","mode":"lasso","pixel":[1,1]}"#, StatusCode::BAD_REQUEST),
        (r#"{"scene_id":"s0","mode":"click","pixel":[1,1],"extra":1}"#, StatusCode::BAD_REQUEST),
        (r#"{"scene_id":"s0","mode":"click","pixel":[1,1],"k":0}"#, StatusCode::BAD_REQUEST),
        (r#"{"scene_id":"s0","mode":"click","pixel":[900,1]}"#, StatusCode::BAD_REQUEST),
        (r#"{"scene_id":"s0","mode":"bbox","bbox":[50,50,40,60]}"#, StatusCode::BAD_REQUEST),
        (r#"{"scene_id":"zz","mode":"click","pixel":[1,1]}"#, StatusCode::NOT_FOUND),
        (r#"{"scene_id":"s1","mode":"click","pixel":[3,4]}"#, StatusCode::UNPROCESSABLE_ENTITY),
    ];
    for (body, want) in cases {
        let (status, _, resp) = call(app(), grasp(body)).await;
        assert_eq!(status, want, "{body}: {}", String::from_utf8_lossy(&resp));
        let v: serde_json::Value = serde_json::from_slice(&resp).unwrap();
        assert!(v["error"].is_string());
    }
}
