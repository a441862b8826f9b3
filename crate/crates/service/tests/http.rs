use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use lacuna_core::model::{ModelConfig, Seq2Seq, Variant};
use lacuna_core::restore::Seq2SeqRestorer;
use lacuna_core::vocab::{CharAlphabet, WordVocab};
use lacuna_core::Restorer;
use lacuna_service::{router, AppState, ProposeResponse, Session};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

const TEXT: &str = "alpha beta ----- gamma delta -- kappa";

fn restorer() -> Arc<dyn Restorer> {
    let alphabet = CharAlphabet::with_extra("abcdefghijklmnopqrstuvwxyz".chars()).unwrap();
    let vocab = WordVocab::build(["alpha beta gamma delta kappa"], 10);
    let mut config = ModelConfig::new(Variant::BiWord, alphabet.len(), vocab.len());
    config.hidden = 8;
    config.char_dim = 6;
    config.word_dim = 4;
    config.dropout = 0.0;
    let model = Seq2Seq::<f32>::init(config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    Arc::new(Seq2SeqRestorer::new(model, alphabet, Some(vocab)).unwrap())
}

fn app(dir: &std::path::Path) -> Router {
    let state = AppState::new(restorer(), dir, "test-model").unwrap();
    router(Arc::new(state), None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn create(app: &Router, text: &str) -> String {
    let (status, body) = call(app, "POST", "/v1/sessions", Some(json!({ "text": text }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    body["id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_reports_model() {
    let dir = tempfile::tempdir().unwrap();
    let (status, body) = call(&app(dir.path()), "GET", "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn create_returns_distinct_ids_and_initial_text() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let a = create(&app, TEXT).await;
    let b = create(&app, TEXT).await;
    assert_ne!(a, b);
    let (status, body) = call(&app, "GET", &format!("/v1/sessions/{a}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let s: Session = serde_json::from_value(body).unwrap();
    assert_eq!(s.text, TEXT);
    assert!(s.history.is_empty());
}

#[tokio::test]
async fn create_rejects_question_marks_and_unknown_chars_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (status, body) = call(&app, "POST", "/v1/sessions", Some(json!({ "text": "ab??c" }))).await;
    assert!(status.is_client_error());
    assert_eq!(body["position"], 2);
    let (status, body) = call(&app, "POST", "/v1/sessions", Some(json!({ "text": "abcX" }))).await;
    assert!(status.is_client_error());
    assert_eq!(body["position"], 3);
}

#[tokio::test]
async fn unknown_session_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (status, _) = call(&app, "GET", "/v1/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(
        &app,
        "POST",
        "/v1/sessions/nope/propose",
        Some(json!({ "start": 0, "length": 1 })),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn propose_is_idempotent_and_read_only() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, TEXT).await;
    let uri = format!("/v1/sessions/{id}/propose");
    let req = json!({ "start": 11, "length": 5 });
    let (s1, first) = call(&app, "POST", &uri, Some(req.clone())).await;
    let (s2, second) = call(&app, "POST", &uri, Some(req)).await;
    assert_eq!(s1, StatusCode::OK, "{first}");
    assert_eq!(s2, StatusCode::OK);
    assert_eq!(first, second);

    let resp: ProposeResponse = serde_json::from_value(first).unwrap();
    assert_eq!(resp.hypotheses.len(), 20);
    for w in resp.hypotheses.windows(2) {
        assert!(w[0].log_prob >= w[1].log_prob);
    }
    for h in &resp.hypotheses {
        assert_eq!(h.text.chars().count(), 5);
        assert_eq!(h.attention.len(), 5);
        assert!(h.attention.iter().flatten().all(|&a| (0.0..=1.0).contains(&a)));
    }

    let (_, body) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(body["text"], TEXT);
}

#[tokio::test]
async fn propose_rejects_spans_over_legible_text() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, TEXT).await;
    let uri = format!("/v1/sessions/{id}/propose");
    for (start, length) in [(10, 5), (12, 5), (0, 3), (40, 2), (11, 0)] {
        let (status, _) = call(&app, "POST", &uri, Some(json!({ "start": start, "length": length }))).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "span {start}+{length}");
    }
}

#[tokio::test]
async fn accept_rejects_length_mismatch_and_missing_markers() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, TEXT).await;
    let uri = format!("/v1/sessions/{id}/accept");
    let (status, _) = call(
        &app,
        "POST",
        &uri,
        Some(json!({ "start": 11, "length": 5, "text": "abcd" })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(
        &app,
        "POST",
        &uri,
        Some(json!({ "start": 11, "length": 5, "text": "ab-de" })),
    )
    .await;
    assert!(status.is_client_error());
    let (_, body) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(body["text"], TEXT);
    assert_eq!(body["history"].as_array().unwrap().len(), 0);
}

#[tokio::test]
async fn accept_allows_overrides_and_history_replays_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let id;
    let after;
    {
        let app = app(dir.path());
        id = create(&app, TEXT).await;
        let uri = format!("/v1/sessions/{id}/accept");
        let (status, body) = call(
            &app,
            "POST",
            &uri,
            Some(json!({ "start": 11, "length": 5, "text": "omega" })),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let (status, body) = call(
            &app,
            "POST",
            &uri,
            Some(json!({ "start": 29, "length": 2, "text": "zz" })),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        after = serde_json::from_value::<Session>(body).unwrap();
        assert_eq!(after.text, "alpha beta omega gamma delta zz kappa");
        assert_eq!(after.history.len(), 2);
        assert!(after.history.iter().all(|h| h.log_prob.is_finite() && h.log_prob < 0.0));
        let (status, _) = call(
            &app,
            "POST",
            &uri,
            Some(json!({ "start": 11, "length": 5, "text": "delta" })),
        )
        .await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
    }
    let app = app(dir.path());
    let (status, body) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let reloaded: Session = serde_json::from_value(body).unwrap();
    assert_eq!(reloaded, after);
    assert_eq!(reloaded.replay().unwrap(), reloaded.text);
}

#[tokio::test]
async fn accepted_log_prob_matches_model_score() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, TEXT).await;
    let (_, proposal) = call(
        &app,
        "POST",
        &format!("/v1/sessions/{id}/propose"),
        Some(json!({ "start": 29, "length": 2, "beam_width": 10, "top_k": 5 })),
    )
    .await;
    let best = &proposal["hypotheses"][0];
    let (_, session) = call(
        &app,
        "POST",
        &format!("/v1/sessions/{id}/accept"),
        Some(json!({ "start": 29, "length": 2, "text": best["text"] })),
    )
    .await;
    let logged = session["history"][0]["log_prob"].as_f64().unwrap();
    assert!((logged - best["log_prob"].as_f64().unwrap()).abs() < 1e-4);
}

#[tokio::test]
async fn one_shot_restore_fills_question_marks() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (status, body) = call(
        &app,
        "POST",
        "/v1/restore",
        Some(json!({ "text": "alpha ??? gamma", "beam_width": 8, "top_k": 4 })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["start"], 6);
    assert_eq!(body["length"], 3);
    let hyps = body["hypotheses"].as_array().unwrap();
    assert_eq!(hyps.len(), 4);
    assert!(hyps.iter().all(|h| h["text"].as_str().unwrap().chars().count() == 3));
    let (status, _) = call(&app, "POST", "/v1/restore", Some(json!({ "text": "no gap here" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn ui_directory_is_served() {
    let dir = tempfile::tempdir().unwrap();
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html>workbench</html>").unwrap();
    let state = AppState::new(restorer(), dir.path(), "m").unwrap();
    let app = router(Arc::new(state), Some(ui.path().to_path_buf()));
    let (status, body) = call(&app, "GET", "/ui/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, Value::String("<html>workbench</html>".into()));
}
