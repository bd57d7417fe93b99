//! HTTP session service driving touch episodes one request at a time.
//!
//! Routes:
//! - `POST /sessions` creates a session and runs the vision fit.
//! - `GET /sessions/{id}` returns the state document.
//! - `POST /sessions/{id}/touch` executes one manual or `"auto"` touch.
//! - `GET /sessions/{id}/suggestion` returns the active policy's next plan.
//! - `GET /sessions/{id}/metrics` returns the CD history as CSV.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use tactoform_core::policy::{next_touch, plan_manual, ManualPlan, PolicyError, TouchPlan, UpdateRule};
use tactoform_core::prior::ShapePrior;
use tactoform_core::refine::TouchRecord;
use tactoform_core::sim::{
    episode_seed, vision_estimate, EpisodeOptions, EpisodeState, Scene, SceneConfig, SimError, SuiteResult, SuiteRow,
    TouchStep, CALIBRATION_PRESSES, CALIBRATION_RADIUS_MM, CALIBRATION_SEED,
};
use tactoform_core::tactile::{SensorSpec, TactileSensor};
use tactoform_core::voxel::{encode_grid, VoxelGrid};

/// Grids sent over the wire are max-pooled to at most this many cells per side.
pub const MAX_TRANSPORT_SIDE: usize = 32;

/// Shared server state: loaded priors and live sessions.
pub struct AppState {
    priors: HashMap<String, Arc<ShapePrior>>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    sensors: RwLock<BTreeMap<String, Arc<TactileSensor>>>,
    options: EpisodeOptions,
}

impl AppState {
    pub fn new(priors: HashMap<String, Arc<ShapePrior>>, options: EpisodeOptions) -> Arc<Self> {
        Arc::new(Self {
            priors,
            sessions: RwLock::new(HashMap::new()),
            sensors: RwLock::new(BTreeMap::new()),
            options,
        })
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.read().expect("sessions lock").get(id).cloned()
    }

    fn sensor(&self, spec: SensorSpec) -> Result<Arc<TactileSensor>, SimError> {
        let key = format!("{spec:?}");
        if let Some(s) = self.sensors.read().expect("sensor lock").get(&key) {
            return Ok(s.clone());
        }
        spec.validate()?;
        let s = Arc::new(TactileSensor::calibrated(
            spec,
            CALIBRATION_RADIUS_MM,
            CALIBRATION_PRESSES,
            CALIBRATION_SEED,
        )?);
        self.sensors.write().expect("sensor lock").insert(key, s.clone());
        Ok(s)
    }
}

pub struct Session {
    pub id: String,
    pub scene: Scene,
    pub prior: Arc<ShapePrior>,
    pub prior_id: String,
    pub seed: u64,
    pub reveal_truth: bool,
    busy: AtomicBool,
    data: RwLock<SessionData>,
}

#[derive(Clone)]
struct SessionData {
    state: EpisodeState,
    steps: Vec<TouchStep>,
}

/// Held while a mutation runs; dropping it frees the session.
pub struct BusyGuard(Arc<Session>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::Release);
    }
}

impl Session {
    /// Claims the session's single writer slot.
    pub fn try_begin(self: &Arc<Self>) -> Option<BusyGuard> {
        self.busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| BusyGuard(self.clone()))
    }

    pub fn is_busy(&self) -> bool {
        self.busy.load(Ordering::Acquire)
    }

    pub fn cd_history(&self) -> Vec<f64> {
        self.data.read().expect("session lock").steps.iter().map(|s| s.cd_sum).collect()
    }

    /// Current full-resolution prediction.
    pub fn grid(&self) -> VoxelGrid {
        self.data.read().expect("session lock").state.grid.clone()
    }

    pub fn state_doc(&self) -> StateDoc {
        state_doc(self)
    }

    fn suggestion(&self) -> Result<TouchPlan, ApiError> {
        let data = self.data.read().expect("session lock").clone();
        Ok(next_touch(&data.state.belief()?, &self.scene.spec())?)
    }

    fn metrics_csv(&self) -> String {
        let data = self.data.read().expect("session lock");
        SuiteResult {
            rows: data
                .steps
                .iter()
                .map(|s| SuiteRow {
                    scene: self.id.clone(),
                    policy: "service".into(),
                    seed: self.seed,
                    touch_index: s.touch_index,
                    cd_sum: s.cd_sum,
                    cd_norm: s.cd_norm,
                    ms: s.ms,
                })
                .collect(),
            failures: vec![],
        }
        .to_csv()
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Conflict,
    Blocked(String),
    Unprocessable(String),
    Internal(String),
}

impl From<SimError> for ApiError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::BadScene(_) | SimError::Shape(_) | SimError::PriorMismatch { .. } | SimError::Tactile(_) => {
                ApiError::BadRequest(e.to_string())
            }
            SimError::Policy(p) => p.into(),
            SimError::PlanOutOfBounds(_) => ApiError::Unprocessable(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<PolicyError> for ApiError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::BlockedPlan => ApiError::Blocked(e.to_string()),
            _ => ApiError::Unprocessable(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind, msg) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, "not_found", m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad_request", m),
            ApiError::Conflict => (
                StatusCode::CONFLICT,
                "conflict",
                "a touch is already running for this session".to_string(),
            ),
            ApiError::Blocked(m) => (StatusCode::UNPROCESSABLE_ENTITY, "blocked_plan", m),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, "unprocessable", m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", m),
        };
        (status, Json(json!({ "error": kind, "message": msg }))).into_response()
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateSession {
    pub scene: SceneConfig,
    pub prior: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub reveal_truth: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub cd_history: Vec<f64>,
}

/// Either the literal string `"auto"` or a manual placement.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TouchRequest {
    Keyword(String),
    Manual(ManualPlan),
    Wrapped { plan: ManualPlan },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPayload {
    pub dims: [usize; 3],
    /// Source cells per transported cell along each axis.
    pub factor: usize,
    /// Base64 of the pooled grid's VXG1 bytes.
    pub vxg1_base64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDoc {
    pub touch_index: usize,
    pub plan: Option<TouchPlan>,
    pub record: Option<TouchRecord>,
    pub cd_sum: f64,
    pub cd_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateDoc {
    pub id: String,
    /// `ready` or `refining`.
    pub state: String,
    pub prior: String,
    pub seed: u64,
    pub resolution: usize,
    pub touches: usize,
    pub cd_history: Vec<f64>,
    pub steps: Vec<StepDoc>,
    pub grid: GridPayload,
    pub suggestion: Option<TouchPlan>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_surface: Option<Vec<[f64; 3]>>,
}

pub fn pooled_payload(grid: &VoxelGrid) -> GridPayload {
    let side = grid.dims().into_iter().max().unwrap_or(1);
    let factor = side.div_ceil(MAX_TRANSPORT_SIDE).max(1);
    let pooled = grid.max_pool(factor);
    GridPayload {
        dims: pooled.dims(),
        factor,
        vxg1_base64: base64::engine::general_purpose::STANDARD.encode(encode_grid(&pooled)),
    }
}

fn state_doc(session: &Session) -> StateDoc {
    let data = session.data.read().expect("session lock").clone();
    let suggestion = data
        .state
        .belief()
        .ok()
        .and_then(|b| next_touch(&b, &session.scene.spec()).ok());
    StateDoc {
        id: session.id.clone(),
        state: if session.is_busy() { "refining" } else { "ready" }.into(),
        prior: session.prior_id.clone(),
        seed: session.seed,
        resolution: session.scene.config.resolution,
        touches: data.steps.len() - 1,
        cd_history: data.steps.iter().map(|s| s.cd_sum).collect(),
        steps: data
            .steps
            .iter()
            .map(|s| StepDoc {
                touch_index: s.touch_index,
                plan: s.plan.clone(),
                record: s.record.clone(),
                cd_sum: s.cd_sum,
                cd_norm: s.cd_norm,
            })
            .collect(),
        grid: pooled_payload(&data.state.grid),
        suggestion,
        truth_surface: session
            .reveal_truth
            .then(|| session.scene.truth_surface().points.iter().map(|p| [p.x, p.y, p.z]).collect()),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let prior = app
        .priors
        .get(&req.prior)
        .cloned()
        .ok_or_else(|| ApiError::NotFound(format!("unknown prior {:?}", req.prior)))?;
    let app2 = app.clone();
    let session = blocking(move || -> Result<Session, ApiError> {
        let sensor = app2.sensor(SensorSpec::from(req.scene.sensor))?;
        let scene = Scene::with_sensor(req.scene, sensor)?;
        let seed = episode_seed(scene.config.seed, req.seed);
        let vision = vision_estimate(&scene, &prior, seed, &app2.options.vision)?;
        let steps = vec![TouchStep {
            touch_index: 0,
            plan: None,
            record: None,
            cd_sum: vision.cd.sum,
            cd_norm: vision.cd.normalized,
            ms: 0.0,
        }];
        Ok(Session {
            id: uuid::Uuid::new_v4().simple().to_string(),
            scene,
            prior,
            prior_id: req.prior,
            seed: req.seed,
            reveal_truth: req.reveal_truth,
            busy: AtomicBool::new(false),
            data: RwLock::new(SessionData {
                state: EpisodeState::new(&vision),
                steps,
            }),
        })
    })
    .await??;
    let created = Created {
        id: session.id.clone(),
        cd_history: session.cd_history(),
    };
    app.sessions
        .write()
        .expect("sessions lock")
        .insert(session.id.clone(), Arc::new(session));
    Ok((StatusCode::CREATED, Json(created)))
}

fn find(app: &AppState, id: &str) -> Result<Arc<Session>, ApiError> {
    app.session(id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown session {id:?}")))
}

async fn get_state(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<StateDoc>, ApiError> {
    let session = find(&app, &id)?;
    Ok(Json(blocking(move || state_doc(&session)).await?))
}

async fn get_suggestion(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<TouchPlan>, ApiError> {
    let session = find(&app, &id)?;
    Ok(Json(blocking(move || session.suggestion()).await??))
}

async fn get_metrics(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = find(&app, &id)?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], session.metrics_csv()).into_response())
}

async fn post_touch(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<TouchRequest>,
) -> Result<Json<StateDoc>, ApiError> {
    let session = find(&app, &id)?;
    let manual = match req {
        TouchRequest::Keyword(k) if k == "auto" => None,
        TouchRequest::Keyword(k) => return Err(ApiError::BadRequest(format!("unknown touch keyword {k:?}"))),
        TouchRequest::Manual(m) | TouchRequest::Wrapped { plan: m } => Some(m),
    };
    let guard = session.try_begin().ok_or(ApiError::Conflict)?;
    let options = app.options;
    blocking(move || -> Result<StateDoc, ApiError> {
        let session = guard.0.clone();
        let mut data = session.data.read().expect("session lock").clone();
        let belief = data.state.belief()?;
        let spec = session.scene.spec();
        let plan = match &manual {
            None => next_touch(&belief, &spec)?,
            Some(m) => plan_manual(&belief, &spec, m)?,
        };
        let outcome = data
            .state
            .apply(&session.scene, &session.prior, &plan, UpdateRule::Refine, &options)?;
        let cd = session.scene.chamfer(&data.state.grid)?;
        let touch_index = data.steps.len();
        data.steps.push(TouchStep {
            touch_index,
            plan: Some(plan),
            record: Some(outcome.record),
            cd_sum: cd.sum,
            cd_norm: cd.normalized,
            ms: 0.0,
        });
        *session.data.write().expect("session lock") = data;
        drop(guard);
        Ok(state_doc(&session))
    })
    .await?
    .map(Json)
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_state))
        .route("/sessions/{id}/touch", post(post_touch))
        .route("/sessions/{id}/suggestion", get(get_suggestion))
        .route("/sessions/{id}/metrics", get(get_metrics))
        .with_state(app)
}

/// Binds and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, app: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app)).await
}
