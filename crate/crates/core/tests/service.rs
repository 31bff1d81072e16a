mod common;

use std::sync::OnceLock;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use common::{tiny, tiny_config};
use fact::recommend::{encode_answers, validate_explanation, AnswerRecord, Explanation, Templates};
use fact::service::{router, AppState, ServiceConfig, SessionView};
use fact::train::alternate;
use fact::tree::route;
use fact::FacTModel;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn model() -> &'static FacTModel {
    static MODEL: OnceLock<FacTModel> = OnceLock::new();
    MODEL.get_or_init(|| alternate(&tiny(8), &tiny_config(3, 8)).unwrap())
}

fn app_with(cfg: ServiceConfig) -> Router {
    router(AppState::new(model().clone(), Templates::default(), &cfg), &cfg).unwrap()
}

fn app() -> Router {
    app_with(ServiceConfig::default())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
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

async fn start(app: &Router) -> SessionView {
    let (status, body) = call(app, "POST", "/api/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    serde_json::from_value(body).unwrap()
}

async fn finish(app: &Router, id: &str) -> SessionView {
    let mut view = None;
    for _ in 0..16 {
        let (status, body) = call(app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"answer": "like"}))).await;
        if status == StatusCode::CONFLICT {
            break;
        }
        assert_eq!(status, StatusCode::OK, "{body}");
        view = Some(serde_json::from_value::<SessionView>(body).unwrap());
    }
    view.expect("at least one question")
}

fn path_of(answers: &[AnswerRecord]) -> Vec<usize> {
    let answers: Vec<_> = answers.iter().map(|a| a.answer).collect();
    route(&model().user_tree, &encode_answers(&model().user_tree, &answers))
}

#[tokio::test]
async fn health_reports_depth() {
    let (status, body) = call(&app(), "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["depth"], model().user_tree.depth());
    assert_eq!(body["max_depth"], 3);
}

#[tokio::test]
async fn interview_flow() {
    let app = app();
    let s = start(&app).await;
    assert_eq!(s.session_id.len(), 32);
    assert_eq!((s.step, s.max_questions), (0, model().user_tree.depth() - 1));
    assert!(s.session_id.chars().all(|c| c.is_ascii_hexdigit()));
    let q = s.question.expect("root question");
    assert!(q.prompt.contains(&q.feature));

    let (status, body) = call(&app, "GET", &format!("/api/sessions/{}/recommendations?k=5", s.session_id), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "state");

    let done = finish(&app, &s.session_id).await;
    assert!(done.question.is_none());

    let (status, body) = call(&app, "POST", &format!("/api/sessions/{}/answer", s.session_id), Some(json!({"answer": "like"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "state");
    assert!(body["message"].is_string());

    let uri = format!("/api/sessions/{}/recommendations?k=5", s.session_id);
    let (status, body) = call(&app, "GET", &uri, None).await;
    assert_eq!(status, StatusCode::OK);
    let recs = body["recommendations"].as_array().unwrap();
    assert_eq!(recs.len(), 5);
    let path = path_of(&done.answers);
    for r in recs {
        let exp: Explanation = serde_json::from_value(r["explanation"].clone()).unwrap();
        let item = r["item_id"].as_u64().unwrap() as usize;
        validate_explanation(model(), &path, item, &exp).unwrap();
        assert_eq!(exp.item, r["item"]);
    }
    let (_, again) = call(&app, "GET", &uri, None).await;
    assert_eq!(again, body);
    let (_, a) = call(&app, "GET", &format!("/api/sessions/{}", s.session_id), None).await;
    let (_, b) = call(&app, "GET", &format!("/api/sessions/{}", s.session_id), None).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn unsure_everywhere_finishes_in_depth_steps() {
    let app = app();
    let s = start(&app).await;
    let mut steps = 0;
    loop {
        let (status, body) =
            call(&app, "POST", &format!("/api/sessions/{}/answer", s.session_id), Some(json!({"answer": "unknown", "step": steps}))).await;
        assert_eq!(status, StatusCode::OK);
        steps += 1;
        if body["question"].is_null() {
            assert_eq!(body["status"], "finished");
            break;
        }
    }
    let all_unknown = vec![fact::recommend::Answer::Unknown; steps];
    let leaf = route(&model().user_tree, &encode_answers(&model().user_tree, &all_unknown));
    assert_eq!(leaf.len(), steps + 1);
}

#[tokio::test]
async fn stale_step_is_a_conflict() {
    let app = app();
    let s = start(&app).await;
    let uri = format!("/api/sessions/{}/answer", s.session_id);
    let (a, b) = tokio::join!(
        call(&app, "POST", &uri, Some(json!({"answer": "like", "step": 0}))),
        call(&app, "POST", &uri, Some(json!({"answer": "dislike", "step": 0}))),
    );
    let mut codes = [a.0, b.0];
    codes.sort();
    assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT]);
    let (_, view) = call(&app, "GET", &format!("/api/sessions/{}", s.session_id), None).await;
    assert_eq!(view["step"], 1);
}

#[tokio::test]
async fn bad_requests() {
    let app = app();
    let s = start(&app).await;
    let uri = format!("/api/sessions/{}/answer", s.session_id);
    let (status, body) = call(&app, "POST", &uri, Some(json!({"answer": "maybe"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "validation");
    let (status, _) = call(&app, "GET", "/api/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/api/users/u00/recommendations?k=0", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, body) = call(&app, "GET", "/api/explanations?user=u00", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "validation");
    let (status, body) = call(&app, "GET", "/api/nothing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "not_found");
}

#[tokio::test]
async fn known_user_recommendations_and_explanations() {
    let app = app();
    let m = model();
    let user = &m.users[0];
    let (status, body) = call(&app, "GET", &format!("/api/users/{user}/recommendations?k=4"), None).await;
    assert_eq!(status, StatusCode::OK);
    let recs = body["recommendations"].as_array().unwrap();
    assert_eq!(recs.len(), 4);
    for r in recs {
        let item = r["item_id"].as_u64().unwrap() as usize;
        assert!(!m.seen[0].contains(&item));
    }
    let item = &m.items[1];
    let (status, body) = call(&app, "GET", &format!("/api/explanations?user={user}&item={item}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let exp: Explanation = serde_json::from_value(body).unwrap();
    validate_explanation(m, &m.user_tree.path_of_entity(0), 1, &exp).unwrap();

    let (status, body) = call(&app, "GET", "/api/users/stranger/recommendations", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "not_found");
}

#[tokio::test]
async fn expired_and_full_stores() {
    let app = app_with(ServiceConfig { session_ttl: Duration::ZERO, ..Default::default() });
    let s = start(&app).await;
    let (status, _) = call(&app, "GET", &format!("/api/sessions/{}", s.session_id), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let app = app_with(ServiceConfig { max_sessions: 1, ..Default::default() });
    start(&app).await;
    let (status, body) = call(&app, "POST", "/api/sessions", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "capacity");
}

#[tokio::test]
async fn cors_allows_the_ui_origin() {
    let app = app_with(ServiceConfig { cors_origin: Some("http://localhost:5173".into()), ..Default::default() });
    let req = Request::builder()
        .uri("/api/health")
        .header(header::ORIGIN, "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(
        resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).unwrap(),
        "http://localhost:5173"
    );
}
