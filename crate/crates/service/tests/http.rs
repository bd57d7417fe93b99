use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use tactoform_core::policy::PolicyRegistry;
use tactoform_core::prior::{fit_prior, vision_params, ShapePrior};
use tactoform_core::refine::DescentParams;
use tactoform_core::shapes::{generate_corpus, ShapeCorpusSpec};
use tactoform_core::sim::{refine_params, run_policy_episode, EpisodeOptions, Scene, SceneConfig, CSV_HEADER};
use tactoform_core::voxel::decode_grid;
use tactoform_service::{router, AppState, StateDoc, MAX_TRANSPORT_SIDE};

const R: usize = 24;

fn prior() -> Arc<ShapePrior> {
    static PRIOR: OnceLock<Arc<ShapePrior>> = OnceLock::new();
    PRIOR
        .get_or_init(|| {
            let corpus = generate_corpus(&ShapeCorpusSpec::balanced(R, 4, 7)).unwrap();
            let refs: Vec<_> = corpus.iter().map(|c| &c.grid).collect();
            Arc::new(fit_prior(&refs, 10).unwrap())
        })
        .clone()
}

fn options() -> EpisodeOptions {
    EpisodeOptions {
        vision: DescentParams {
            steps: 150,
            ..vision_params()
        },
        refine: DescentParams {
            steps: 10,
            ..refine_params()
        },
        ..EpisodeOptions::default()
    }
}

fn app() -> Arc<AppState> {
    AppState::new(HashMap::from([("fixture".to_string(), prior())]), options())
}

fn scene() -> SceneConfig {
    SceneConfig::from_json(
        &json!({
            "resolution": R,
            "voxel_mm": 2.0,
            "shape": { "family": "cylinder", "params": { "radius": 4.5, "height": 9.0 } },
            "seed": 4
        })
        .to_string(),
    )
    .unwrap()
}

async fn call(app: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = router(app.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn create(app: &Arc<AppState>, seed: u64, reveal: bool) -> (String, Vec<f64>) {
    let (status, v) = call_json(
        app,
        "POST",
        "/sessions",
        Some(json!({ "scene": scene(), "prior": "fixture", "seed": seed, "reveal_truth": reveal })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    let history = serde_json::from_value(v["cd_history"].clone()).unwrap();
    (v["id"].as_str().unwrap().to_string(), history)
}

async fn state(app: &Arc<AppState>, id: &str) -> StateDoc {
    let (status, v) = call_json(app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn create_returns_one_cd_entry() {
    let app = app();
    let (id, history) = create(&app, 0, false).await;
    assert_eq!(history.len(), 1);
    let doc = state(&app, &id).await;
    assert_eq!(doc.touches, 0);
    assert_eq!(doc.cd_history, history);
    assert_eq!(doc.state, "ready");
    assert!(doc.suggestion.is_some());
}

#[tokio::test]
async fn unknown_prior_and_session_are_404() {
    let app = app();
    let (status, _) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({ "scene": scene(), "prior": "nope", "seed": 0 })),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    for (m, uri) in [
        ("GET", "/sessions/missing"),
        ("GET", "/sessions/missing/suggestion"),
        ("GET", "/sessions/missing/metrics"),
    ] {
        assert_eq!(call(&app, m, uri, None).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
    let (status, _) = call(&app, "POST", "/sessions/missing/touch", Some(json!("auto"))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn same_seed_gives_same_initial_cd() {
    let app = app();
    let (a, ha) = create(&app, 3, false).await;
    let (b, hb) = create(&app, 3, false).await;
    assert_ne!(a, b);
    assert_eq!(ha, hb);
}

#[tokio::test]
async fn pooled_grid_matches_full_resolution_pooling() {
    let app = app();
    let (id, _) = create(&app, 0, false).await;
    let doc = state(&app, &id).await;
    let full = app.session(&id).unwrap().grid();
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(&doc.grid.vxg1_base64)
        .unwrap();
    let pooled = decode_grid(&bytes, *full.frame()).unwrap();
    let f = doc.grid.factor;
    assert!(pooled.dims().iter().all(|&d| d <= MAX_TRANSPORT_SIDE));
    assert_eq!(pooled.dims(), doc.grid.dims);
    let d = full.dims();
    for (i, &v) in pooled.values().iter().enumerate() {
        assert!((0.0..=1.0).contains(&v));
        let c = pooled.cell(i);
        let mut want = f32::MIN;
        for x in c[0] * f..((c[0] + 1) * f).min(d[0]) {
            for y in c[1] * f..((c[1] + 1) * f).min(d[1]) {
                for z in c[2] * f..((c[2] + 1) * f).min(d[2]) {
                    want = want.max(full.get([x, y, z]));
                }
            }
        }
        assert_eq!(v, want, "pooled cell {c:?}");
    }
}

#[tokio::test]
async fn auto_touches_reproduce_the_cli_episode() {
    let app = app();
    let (id, _) = create(&app, 1, false).await;
    let mut doc = state(&app, &id).await;
    for _ in 0..10 {
        let (status, v) = call_json(&app, "POST", &format!("/sessions/{id}/touch"), Some(json!("auto"))).await;
        if status == StatusCode::UNPROCESSABLE_ENTITY {
            break;
        }
        assert_eq!(status, StatusCode::OK, "{v}");
        doc = serde_json::from_value(v).unwrap();
    }
    let scene = Scene::build(scene()).unwrap();
    let episode = run_policy_episode(
        &scene,
        &prior(),
        &PolicyRegistry::default(),
        "active",
        Vec::new(),
        1,
        10,
        options(),
    )
    .unwrap();
    assert_eq!(doc.cd_history, episode.cd_history());
    assert_eq!(doc.touches + 1, doc.cd_history.len());
    let plans: Vec<_> = doc.steps.iter().map(|s| s.plan.clone()).collect();
    let want: Vec<_> = episode.steps.iter().map(|s| s.plan.clone()).collect();
    assert_eq!(plans, want);
}

#[tokio::test]
async fn touch_changes_state() {
    let app = app();
    let (id, _) = create(&app, 0, false).await;
    let before = state(&app, &id).await;
    let (status, v) = call_json(&app, "POST", &format!("/sessions/{id}/touch"), Some(json!("auto"))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let after: StateDoc = serde_json::from_value(v).unwrap();
    assert_eq!(after.touches, 1);
    assert_eq!(after.cd_history.len(), 2);
    let executed = after.steps[1].plan.clone().unwrap();
    let region_moved = after.suggestion.as_ref().map(|s| s.center != executed.center).unwrap_or(true);
    assert!(region_moved || after.grid.vxg1_base64 != before.grid.vxg1_base64);
}

#[tokio::test]
async fn manual_touch_in_free_space_is_a_miss() {
    let app = app();
    let (id, _) = create(&app, 0, false).await;
    let plan = json!({ "center": [2.0, 2.0, 18.0], "yaw_deg": 0.0, "pitch_deg": 0.0 });
    let (status, v) = call_json(&app, "POST", &format!("/sessions/{id}/touch"), Some(plan)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let doc: StateDoc = serde_json::from_value(v).unwrap();
    let record = doc.steps[1].record.clone().unwrap();
    assert!(!record.hit);
    assert!(record.contact.is_none());
    assert!(record.patch_cells.is_empty());
    assert!(!record.ray_cells.is_empty());
}

#[tokio::test]
async fn plan_through_the_object_is_rejected() {
    let app = app();
    let (id, history) = create(&app, 0, false).await;
    // Approaching along -x toward the far side crosses the predicted shape.
    let c = (R as f64 - 1.0) / 2.0;
    let plan = json!({ "center": [c - 4.0, c, 4.0], "yaw_deg": 0.0, "pitch_deg": 0.0 });
    let (status, v) = call_json(&app, "POST", &format!("/sessions/{id}/touch"), Some(plan)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    assert_eq!(v["error"], "blocked_plan");
    assert_eq!(state(&app, &id).await.cd_history, history);
}

#[tokio::test]
async fn concurrent_touch_is_409() {
    let app = app();
    let (id, _) = create(&app, 0, false).await;
    let session = app.session(&id).unwrap();
    let guard = session.try_begin().unwrap();
    assert_eq!(state(&app, &id).await.state, "refining");
    let (status, v) = call_json(&app, "POST", &format!("/sessions/{id}/touch"), Some(json!("auto"))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"], "conflict");
    drop(guard);
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/touch"), Some(json!("auto"))).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn sessions_are_isolated() {
    let app = app();
    let (a, _) = create(&app, 2, false).await;
    let (b, _) = create(&app, 2, false).await;
    for _ in 0..2 {
        call(&app, "POST", &format!("/sessions/{a}/touch"), Some(json!("auto"))).await;
    }
    assert_eq!(state(&app, &b).await.cd_history.len(), 1);
    call(&app, "POST", &format!("/sessions/{b}/touch"), Some(json!("auto"))).await;
    let (ha, hb) = (state(&app, &a).await.cd_history, state(&app, &b).await.cd_history);
    assert_eq!(ha[..2], hb[..]);
}

#[tokio::test]
async fn metrics_csv_tracks_history() {
    let app = app();
    let (id, _) = create(&app, 0, false).await;
    call(&app, "POST", &format!("/sessions/{id}/touch"), Some(json!("auto"))).await;
    let (status, body) = call(&app, "GET", &format!("/sessions/{id}/metrics"), None).await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(body).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 3);
}

#[tokio::test]
async fn suggestion_endpoint_matches_state() {
    let app = app();
    let (id, _) = create(&app, 0, false).await;
    let (status, v) = call_json(&app, "GET", &format!("/sessions/{id}/suggestion"), None).await;
    assert_eq!(status, StatusCode::OK);
    let doc = state(&app, &id).await;
    assert_eq!(serde_json::from_value::<tactoform_core::policy::TouchPlan>(v).ok(), doc.suggestion);
}

#[tokio::test]
async fn truth_is_hidden_unless_revealed() {
    let app = app();
    let (hidden, _) = create(&app, 0, false).await;
    let (shown, _) = create(&app, 0, true).await;
    let (_, v) = call_json(&app, "GET", &format!("/sessions/{hidden}"), None).await;
    assert!(v.get("truth_surface").is_none());
    let doc = state(&app, &shown).await;
    assert!(!doc.truth_surface.unwrap().is_empty());
}

#[tokio::test]
async fn bad_touch_keyword_is_400() {
    let app = app();
    let (id, _) = create(&app, 0, false).await;
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/touch"), Some(json!("manual"))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}
