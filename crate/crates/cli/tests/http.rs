use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use hnu_cli::server::{router, AppState};
use hnu_core::corpus::{events_to_steps, read_traces, validate_events};
use hnu_core::logic::{parse_expression, Problem, Rule, Section};
use hnu_core::metrics::hint_counts;
use hnu_core::policy::{PolicyConfig, PolicyKind};
use hnu_core::predictor::{planted_cohort, train, FeatureSettings, TrainParams};
use hnu_core::session::Tutor;
use hnu_core::sim::Curriculum;

fn problem(id: &str, section: Section, premises: &[&str], conclusion: &str, optimal: usize) -> Problem {
    Problem {
        id: id.into(),
        premises: premises.iter().map(|s| parse_expression(s).unwrap()).collect(),
        conclusion: parse_expression(conclusion).unwrap(),
        allowed_rules: vec![Rule::ModusPonens, Rule::ModusTollens, Rule::Simplification],
        section,
        optimal_length: optimal,
    }
}

/// A model whose threshold makes every prediction HelpNeed.
fn eager_model() -> hnu_core::predictor::HelpNeedModel {
    let settings = FeatureSettings {
        key_mode: Default::default(),
        penalty: true,
        combo: Default::default(),
        thresholds: BTreeMap::new(),
    };
    let mut params = TrainParams::default();
    params.forest.n_trees = 5;
    let mut model = train(&planted_cohort(0, 10, 10), &params, settings).unwrap();
    model.threshold = 0.0;
    model
}

fn tutor(with_model: bool) -> Arc<Tutor> {
    let curriculum = Curriculum::new(vec![
        problem("pre", Section::Pretest, &["p", "p -> q"], "q", 1),
        problem("train", Section::Training, &["p & s", "p -> q", "q -> r"], "r", 3),
    ]);
    Arc::new(Tutor::new(&curriculum, BTreeMap::new(), with_model.then(eager_model)))
}

fn app(tutor: Arc<Tutor>, store: Option<std::path::PathBuf>) -> Router {
    let defaults = PolicyConfig::new(PolicyKind::Control);
    router(Arc::new(AppState::new(tutor, store, defaults, 0).unwrap()), None)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn create(app: &Router, body: Value) -> String {
    let (status, snap) = call(app, Method::POST, "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{snap}");
    snap["id"].as_str().unwrap().to_string()
}

fn derive(rule: &str, premises: &[usize], statement: &str) -> Value {
    json!({ "kind": "derive", "rule": rule, "premises": premises, "statement": statement, "action_time": 5.0 })
}

#[tokio::test]
async fn create_serves_first_pretest_problem() {
    let app = app(tutor(false), None);
    let (status, snap) = call(&app, Method::POST, "/sessions", Some(json!({ "student": "ann" }))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(snap["problem"]["id"], "pre");
    assert_eq!(snap["problem"]["section"], "pretest");
    assert_eq!(snap["problem_index"], 0);
    let id = snap["id"].as_str().unwrap();
    let (status, again) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again, snap);
}

#[tokio::test]
async fn error_statuses() {
    let app = app(tutor(false), None);
    let (status, body) = call(&app, Method::GET, "/sessions/missing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());
    let (status, _) = call(&app, Method::POST, "/sessions/missing/hint", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, _) = call(&app, Method::POST, "/sessions", Some(json!({ "name": "x" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, Method::POST, "/sessions", Some(json!({ "student": "x", "policy": "sometimes" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, Method::POST, "/sessions", Some(json!({ "student": "x", "policy": "adaptive" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "adaptive without a model");

    let id = create(&app, json!({ "student": "bo" })).await;
    let steps = format!("/sessions/{id}/steps");
    for bad in [
        json!({ "kind": "derive", "rule": "modus_ponens", "premises": [1, 0], "statement": "q ->" }),
        json!({ "kind": "derive", "rule": "no_such_rule", "premises": [1, 0], "statement": "q" }),
        json!({ "kind": "derive", "rule": "modus_ponens", "premises": [1, 7], "statement": "q" }),
        json!({ "kind": "derive", "rule": "addition", "premises": [0], "statement": "p | q" }),
        json!({ "kind": "delete", "index": 0 }),
        json!({ "kind": "jump" }),
    ] {
        let (status, body) = call(&app, Method::POST, &steps, Some(bad.clone())).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{bad} -> {body}");
    }
    let (status, _) = call(&app, Method::POST, &steps, None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn incorrect_then_correct_step() {
    let app = app(tutor(false), None);
    let id = create(&app, json!({ "student": "cy" })).await;
    let steps = format!("/sessions/{id}/steps");
    let (status, out) = call(&app, Method::POST, &steps, Some(derive("modus_tollens", &[1, 0], "q"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(out["correct"], false);
    assert!(out["feedback"].is_string());
    assert_eq!(out["session"]["steps"], 0);
    let (status, out) = call(&app, Method::POST, &steps, Some(derive("modus_ponens", &[1, 0], "q"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(out["correct"], true);
    assert_eq!(out["complete"], true);
    let (status, _) = call(&app, Method::POST, &steps, Some(derive("modus_ponens", &[1, 0], "q"))).await;
    assert_eq!(status, StatusCode::CONFLICT, "problem already solved");
    let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/hint"), None).await;
    assert_eq!(status, StatusCode::CONFLICT, "no hints in the pretest");
}

#[tokio::test]
async fn control_sessions_get_on_demand_hints_only() {
    let app = app(tutor(true), None);
    let id = create(&app, json!({ "student": "di", "policy": "control" })).await;
    call(&app, Method::POST, &format!("/sessions/{id}/steps"), Some(derive("modus_ponens", &[1, 0], "q"))).await;
    let (status, adv) = call(&app, Method::POST, &format!("/sessions/{id}/advance"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(adv["proactive_hint"].is_null());
    assert_eq!(adv["prediction"]["acted"], false, "shadow prediction under control");
    let (status, h1) = call(&app, Method::POST, &format!("/sessions/{id}/hint"), Some(json!({ "action_time": 3.0 }))).await;
    assert_eq!(status, StatusCode::OK);
    let (_, h2) = call(&app, Method::POST, &format!("/sessions/{id}/hint"), None).await;
    assert_eq!(h1["hint"]["statement"], h2["hint"]["statement"]);
    assert_eq!(h1["hint"]["agency"], "on_demand");
    let (_, out) = call(&app, Method::POST, &format!("/sessions/{id}/steps"), Some(derive("simplification", &[0], "p"))).await;
    assert!(out["proactive_hint"].is_null());
}

/// Scripted version of the interactive flow: a two-step proof with one
/// incorrect application and a justified proactive hint.
#[tokio::test]
async fn adaptive_flow_replays_with_full_hjr() {
    let dir = tempfile::tempdir().unwrap();
    let tutor = tutor(true);
    let app = app(tutor.clone(), Some(dir.path().to_path_buf()));
    let id = create(&app, json!({ "student": "eve", "policy": "adaptive" })).await;
    let steps = format!("/sessions/{id}/steps");
    call(&app, Method::POST, &steps, Some(derive("modus_ponens", &[1, 0], "q"))).await;
    let (_, adv) = call(&app, Method::POST, &format!("/sessions/{id}/advance"), None).await;
    let hint = adv["proactive_hint"].clone();
    assert_eq!(hint["agency"], "proactive");
    assert_eq!(hint["statement"], "p");
    assert_eq!(adv["session"]["pending_hint"], hint);

    let (_, wrong) = call(&app, Method::POST, &steps, Some(derive("modus_ponens", &[1, 0], "q"))).await;
    assert_eq!(wrong["correct"], false);
    let (_, ok) = call(&app, Method::POST, &steps, Some(derive("simplification", &[0], "p"))).await;
    assert_eq!(ok["justified_hint"], hint["seq"]);
    let next = ok["proactive_hint"].clone();
    assert_eq!(next["statement"], "q");
    let (_, ok) = call(&app, Method::POST, &steps, Some(derive("modus_ponens", &[1, 3], "q"))).await;
    assert_eq!(ok["justified_hint"], next["seq"]);
    let last = ok["proactive_hint"].clone();
    let (_, done) = call(&app, Method::POST, &steps, Some(derive("modus_ponens", &[2, 4], "r"))).await;
    assert_eq!(done["complete"], true);
    assert_eq!(done["justified_hint"], last["seq"]);
    assert!(done["proactive_hint"].is_null());

    let log = std::fs::read(dir.path().join(format!("{id}.jsonl"))).unwrap();
    let events = read_traces(&log[..]).unwrap();
    validate_events(&events).unwrap();
    let steps = events_to_steps(&events, &tutor.problems()[1]).unwrap();
    assert_eq!(steps.len(), 3);
    assert!(steps.iter().all(|s| s.hint_used));
    assert_eq!(steps[0].failed_attempts, 1);
    let counts = hint_counts(&events);
    assert_eq!(counts.issued(), 3);
    assert_eq!(counts.hjr(), Some(1.0));

    // a fresh service over the same store recovers the session by replay
    let (_, before) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    let restarted = self::app(tutor, Some(dir.path().to_path_buf()));
    let (status, after) = call(&restarted, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(before, after);
}

#[tokio::test]
async fn cors_preflight() {
    let app = app(tutor(false), None);
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/sessions")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
}
