//! HTTP tutor service over [`hnu_core::session`].

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

use hnu_core::corpus::{read_traces, write_events};
use hnu_core::hints::HintError;
use hnu_core::logic::KeyMode;
use hnu_core::policy::{PolicyConfig, PolicyError, PolicyKind};
use hnu_core::session::{Session, SessionError, SessionHeader, StepInput, Tutor};

use crate::error::CliError;

struct Entry {
    session: Session,
    last: Instant,
    /// Events already written to the store.
    persisted: usize,
}

pub struct AppState {
    tutor: Arc<Tutor>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Entry>>>>,
    store: Option<PathBuf>,
    defaults: PolicyConfig,
    seed: u64,
}

impl AppState {
    /// Loads any sessions persisted under `store`.
    pub fn new(tutor: Arc<Tutor>, store: Option<PathBuf>, defaults: PolicyConfig, seed: u64) -> Result<Self, CliError> {
        let mut sessions = HashMap::new();
        if let Some(dir) = &store {
            fs::create_dir_all(dir).map_err(|source| file_error(dir, source))?;
            for entry in fs::read_dir(dir)? {
                let path = entry?.path();
                if path.extension().is_none_or(|e| e != "json") {
                    continue;
                }
                let text = fs::read_to_string(&path).map_err(|source| file_error(&path, source))?;
                let header: SessionHeader = serde_json::from_str(&text)?;
                let log = path.with_extension("jsonl");
                let events = if log.exists() {
                    read_traces(std::io::BufReader::new(fs::File::open(&log)?))?
                } else {
                    Vec::new()
                };
                let persisted = events.len();
                let session = Session::restore(tutor.clone(), header, events)?;
                let id = session.header().id.clone();
                sessions.insert(
                    id,
                    Arc::new(Mutex::new(Entry {
                        session,
                        last: Instant::now(),
                        persisted,
                    })),
                );
            }
        }
        Ok(AppState {
            tutor,
            sessions: Mutex::new(sessions),
            store,
            defaults,
            seed,
        })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map").len()
    }

    fn get(&self, id: &str) -> Result<Arc<Mutex<Entry>>, ApiError> {
        self.sessions
            .lock()
            .expect("session map")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session `{id}`")))
    }

    /// Appends new events and rewrites the header.
    fn persist(&self, entry: &mut Entry) -> Result<(), ApiError> {
        let Some(dir) = &self.store else { return Ok(()) };
        let header = entry.session.header();
        let base = dir.join(&header.id);
        let io = |e: std::io::Error| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
        let fresh = &entry.session.events()[entry.persisted..];
        if !fresh.is_empty() {
            let mut log = OpenOptions::new().create(true).append(true).open(base.with_extension("jsonl")).map_err(io)?;
            write_events(fresh, &mut log).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
            log.flush().map_err(io)?;
        }
        let text = serde_json::to_string(header).expect("header serializes");
        fs::write(base.with_extension("json"), text).map_err(io)?;
        entry.persisted = entry.session.events().len();
        Ok(())
    }
}

fn file_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::File {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::InvalidStep(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Policy(PolicyError::MissingModel | PolicyError::PenaltyMismatch { .. }) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Conflict(_) | SessionError::Hint(HintError::AlreadySolved) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

/// Parses a JSON body; an empty body reads as `{}`.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let text = if body.iter().all(u8::is_ascii_whitespace) { &b"{}"[..] } else { &body[..] };
    serde_json::from_slice(text).map_err(|e| ApiError::invalid(format!("invalid payload: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    student: String,
    #[serde(default)]
    policy: Option<String>,
    #[serde(default)]
    penalty: Option<bool>,
    #[serde(default)]
    key_mode: Option<KeyMode>,
    #[serde(default)]
    cooldown: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct StepRequest {
    #[serde(flatten)]
    step: StepInput,
    #[serde(default)]
    action_time: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TimedRequest {
    #[serde(default)]
    action_time: Option<f64>,
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    sessions: usize,
}

/// Seconds since the session's previous action unless the client says.
fn elapsed(entry: &mut Entry, given: Option<f64>) -> f64 {
    let now = Instant::now();
    let t = given.unwrap_or_else(|| now.duration_since(entry.last).as_secs_f64());
    entry.last = now;
    t
}

async fn create(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = parse(&body)?;
    if req.student.trim().is_empty() {
        return Err(ApiError::invalid("student must not be empty"));
    }
    let mut policy = app.defaults;
    if let Some(p) = &req.policy {
        policy.kind = p.parse::<PolicyKind>().map_err(ApiError::invalid)?;
    }
    if let Some(p) = req.penalty {
        policy.penalty_enabled = p;
    }
    if let Some(k) = req.key_mode {
        policy.key_mode = k;
    }
    if let Some(c) = req.cooldown {
        policy.cooldown = c;
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = Session::new(app.tutor.clone(), &id, &req.student, policy, app.seed)?;
    let mut entry = Entry {
        session,
        last: Instant::now(),
        persisted: 0,
    };
    app.persist(&mut entry)?;
    let snapshot = entry.session.snapshot();
    app.sessions.lock().expect("session map").insert(id, Arc::new(Mutex::new(entry)));
    Ok((StatusCode::CREATED, Json(snapshot)).into_response())
}

async fn show(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let entry = app.get(&id)?;
    let entry = entry.lock().expect("session");
    Ok(Json(entry.session.snapshot()).into_response())
}

async fn step(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Response, ApiError> {
    let entry = app.get(&id)?;
    let req: StepRequest = parse(&body)?;
    let mut entry = entry.lock().expect("session");
    let t = elapsed(&mut entry, req.action_time);
    let out = entry.session.submit_step(req.step, t)?;
    app.persist(&mut entry)?;
    Ok(Json(out).into_response())
}

async fn hint(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Response, ApiError> {
    let entry = app.get(&id)?;
    let req: TimedRequest = parse(&body)?;
    let mut entry = entry.lock().expect("session");
    let t = elapsed(&mut entry, req.action_time);
    let out = entry.session.request_hint(t)?;
    app.persist(&mut entry)?;
    Ok(Json(out).into_response())
}

async fn advance(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Response, ApiError> {
    let entry = app.get(&id)?;
    let _: TimedRequest = parse(&body)?;
    let mut entry = entry.lock().expect("session");
    let out = entry.session.advance()?;
    app.persist(&mut entry)?;
    Ok(Json(out).into_response())
}

async fn health(State(app): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok",
        sessions: app.session_count(),
    })
}

/// `cors_origin` of `None` allows any origin.
pub fn router(app: Arc<AppState>, cors_origin: Option<HeaderValue>) -> Router {
    let origin = match cors_origin {
        Some(o) => AllowOrigin::exact(o),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/steps", post(step))
        .route("/sessions/{id}/hint", post(hint))
        .route("/sessions/{id}/advance", post(advance))
        .layer(cors)
        .with_state(app)
}
