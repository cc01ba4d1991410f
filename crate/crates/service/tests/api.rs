use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use corecog::data::{generate_corpus, CorpusConfig};
use corecog::history::HistoryOptions;
use corecog::kb::{entities_of_type, KnowledgeBase};
use corecog::model::{ModelBundle, ModelConfig};
use corecog::pipeline::PipelineConfig;
use corecog::train::{corpus_vocab, prepare_examples, train, TrainConfig, DEFAULT_HISTORY_LEN};
use corecog_service::{router, AppState, MessageResponse, MAX_SESSIONS};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// A small model trained long enough to separate chit-chat from requests.
fn trained() -> &'static (ModelBundle, KnowledgeBase, Vec<String>) {
    static FIXTURE: OnceLock<(ModelBundle, KnowledgeBase, Vec<String>)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let corpus = generate_corpus(&CorpusConfig { n_dialogs: 60, n_entities_per_type: 4, ..CorpusConfig::default() }).unwrap();
        let vocab = corpus_vocab(&corpus.train, &corpus.kb);
        let mut cfg = ModelConfig::desk(vocab.len(), 4, corpus.kb.len());
        cfg.dim = 32;
        cfg.layers = 1;
        let mut model = ModelBundle::new(cfg, vocab, 1).unwrap();
        let ex = prepare_examples(&corpus.train, &corpus.kb, &model, HistoryOptions::new(DEFAULT_HISTORY_LEN)).unwrap();
        train(&mut model, &ex, &corpus.kb, &TrainConfig { epochs: 6, lr: 3e-3, ..TrainConfig::default() }, None, |_| {}).unwrap();
        let requests = corpus
            .test
            .iter()
            .flat_map(|d| d.turns.windows(2).filter(|w| w[1].trigger == Some(true) && w[0].text.contains("with")).map(|w| w[0].text.clone()).collect::<Vec<_>>())
            .collect();
        (model, corpus.kb, requests)
    })
}

fn app() -> (Router, Arc<AppState>) {
    let (model, kb, _) = trained();
    let state = Arc::new(AppState::new(model.clone(), kb.clone(), PipelineConfig::default(), "abc123".into()));
    (router(Arc::clone(&state), Some("http://localhost:5173")).unwrap(), state)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn new_session(app: &Router, body: Option<Value>) -> String {
    let (status, v) = call(app, "POST", "/v1/session", body).await;
    assert_eq!(status, StatusCode::CREATED);
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_reports_the_model_hash() {
    let (app, _) = app();
    let (status, v) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok", "model": "abc123"}));
}

#[tokio::test]
async fn session_creation_and_decoder_choice() {
    let (app, _) = app();
    let (status, v) = call(&app, "POST", "/v1/session", None).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(v["decoder"], "hopskip");
    let (status, v) = call(&app, "POST", "/v1/session", Some(json!({"decoder": "cold"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(v["decoder"], "cold");
    let (status, v) = call(&app, "POST", "/v1/session", Some(json!({"decoder": "magic"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("magic"));
}

#[tokio::test]
async fn fresh_history_is_empty() {
    let (app, _) = app();
    let id = new_session(&app, None).await;
    let (status, v) = call(&app, "GET", &format!("/v1/session/{id}/history"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["turns"], json!([]));
}

#[tokio::test]
async fn unknown_session_is_404() {
    let (app, _) = app();
    let (status, v) = call(&app, "POST", "/v1/session/nope/message", Some(json!({"text": "hi"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(v["error"].is_string());
    let (status, _) = call(&app, "GET", "/v1/session/nope/history", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn empty_or_oversized_text_is_422() {
    let (app, _) = app();
    let id = new_session(&app, None).await;
    let uri = format!("/v1/session/{id}/message");
    assert_eq!(call(&app, "POST", &uri, Some(json!({"text": "   "}))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, "POST", &uri, Some(json!({}))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let long = "a".repeat(513);
    assert_eq!(call(&app, "POST", &uri, Some(json!({"text": long}))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn chit_chat_then_request_recommends_by_name() {
    let (app, _) = app();
    let id = new_session(&app, None).await;
    let uri = format!("/v1/session/{id}/message");
    let (status, v) = call(&app, "POST", &uri, Some(json!({"text": "hello !"}))).await;
    assert_eq!(status, StatusCode::OK);
    let r: MessageResponse = serde_json::from_value(v).unwrap();
    assert!(!r.triggered);
    assert!(r.entity.is_none() && r.candidates.is_empty());
    assert!(!r.reply.is_empty());

    let request = &trained().2[0];
    let (_, v) = call(&app, "POST", &uri, Some(json!({ "text": request }))).await;
    let r: MessageResponse = serde_json::from_value(v).unwrap();
    assert!(r.triggered, "{r:?}");
    let entity = r.entity.clone().unwrap();
    assert!(r.reply.contains(&entity.name), "{} / {}", r.reply, entity.name);
    assert_eq!(r.candidates[0].id, entity.id);
    let best_type = r.type_distribution.iter().max_by(|a, b| a.1.as_f64().unwrap().total_cmp(&b.1.as_f64().unwrap())).unwrap().0;
    assert!(r.candidates.iter().all(|c| &c.type_name == best_type));
    let total: f64 = r.type_distribution.values().map(|p| p.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);

    let (_, v) = call(&app, "GET", &format!("/v1/session/{id}/history"), None).await;
    let turns = v["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 4);
    assert_eq!(turns[0]["speaker"], "user");
    assert_eq!(turns[3]["speaker"], "agent");
    assert_eq!(turns[3]["entity"]["name"], json!(entity.name));
}

#[tokio::test]
async fn cold_sessions_decode_with_cold() {
    let (app, _) = app();
    let id = new_session(&app, Some(json!({"decoder": "cold"}))).await;
    let (_, v) = call(&app, "POST", &format!("/v1/session/{id}/message"), Some(json!({ "text": trained().2[1] }))).await;
    let r: MessageResponse = serde_json::from_value(v).unwrap();
    assert!(r.triggered);
    assert_eq!(r.decoder, corecog::decode::DecodeMode::Cold);
}

#[tokio::test]
async fn kb_listing_filters_by_type() {
    let (app, _) = app();
    let (_, kb, _) = trained();
    let (status, v) = call(&app, "GET", "/v1/kb/entities?type=food", None).await;
    assert_eq!(status, StatusCode::OK);
    let got: Vec<u64> = v["entities"].as_array().unwrap().iter().map(|e| e["id"].as_u64().unwrap()).collect();
    let want: Vec<u64> = entities_of_type(kb, kb.type_id("food").unwrap()).unwrap().iter().map(|e| e.0 as u64).collect();
    assert_eq!(got, want);
    assert!(v["entities"].as_array().unwrap().iter().all(|e| e["type"] == "food"));
    let (status, _) = call(&app, "GET", "/v1/kb/entities?type=spaceship", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (_, all) = call(&app, "GET", "/v1/kb/entities", None).await;
    assert_eq!(all["entities"].as_array().unwrap().len(), kb.len());
}

#[tokio::test]
async fn cors_allows_the_configured_origin() {
    let (app, _) = app();
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/v1/session")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:5173");
}

#[tokio::test]
async fn sessions_are_evicted_beyond_capacity() {
    let (app, state) = app();
    let first = new_session(&app, None).await;
    for _ in 0..MAX_SESSIONS {
        new_session(&app, None).await;
    }
    assert_eq!(state.session_count(), MAX_SESSIONS);
    let (status, _) = call(&app, "GET", &format!("/v1/session/{first}/history"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn turns_within_a_session_stay_ordered() {
    let (app, _) = app();
    let id = new_session(&app, None).await;
    let uri = format!("/v1/session/{id}/message");
    let texts = ["hello !", "i am looking for a dish .", "thanks , bye !", "hi there !"];
    let handles: Vec<_> = texts
        .iter()
        .map(|t| {
            let app = app.clone();
            let uri = uri.clone();
            let body = json!({ "text": t });
            tokio::spawn(async move { call(&app, "POST", &uri, Some(body)).await.0 })
        })
        .collect();
    for h in handles {
        assert_eq!(h.await.unwrap(), StatusCode::OK);
    }
    let (_, v) = call(&app, "GET", &format!("/v1/session/{id}/history"), None).await;
    let turns = v["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 8);
    for (i, t) in turns.iter().enumerate() {
        assert_eq!(t["speaker"], if i % 2 == 0 { "user" } else { "agent" });
    }
    let users: std::collections::BTreeSet<&str> = turns.iter().step_by(2).map(|t| t["text"].as_str().unwrap()).collect();
    assert_eq!(users, texts.iter().copied().collect());
}
