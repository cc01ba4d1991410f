//! HTTP chat service: sessions, per-turn recommendation responses with
//! introspection, and knowledge-base browsing.

use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use corecog::decode::DecodeMode;
use corecog::history::{DialogHistory, Speaker, Turn};
use corecog::kb::{entities_of_type, load_kb, precompute_embeddings, EntityEmbeddingTable, KnowledgeBase};
use corecog::model::{load_checkpoint, ModelBundle};
use corecog::pipeline::{respond, PipelineConfig};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use tower_http::cors::{AllowOrigin, CorsLayer};

pub const MAX_SESSIONS: usize = 1000;
pub const MAX_MESSAGE_CHARS: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown decoder `{0}`")]
    UnknownDecoder(String),
    #[error("unknown entity type `{0}`")]
    UnknownType(String),
    #[error("{0}")]
    InvalidText(String),
    #[error("malformed request body: {0}")]
    BadBody(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            Self::UnknownSession(_) => StatusCode::NOT_FOUND,
            Self::UnknownDecoder(_) | Self::UnknownType(_) | Self::BadBody(_) => StatusCode::BAD_REQUEST,
            Self::InvalidText(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub history: DialogHistory,
    pub decoder: DecodeMode,
    pub created_at: u64,
    transcript: Vec<TurnView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityView {
    pub id: usize,
    pub name: String,
    #[serde(rename = "type")]
    pub type_name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub id: usize,
    pub name: String,
    #[serde(rename = "type")]
    pub type_name: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnView {
    pub speaker: Speaker,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entity: Option<EntityView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageResponse {
    pub reply: String,
    pub triggered: bool,
    pub entity: Option<EntityView>,
    pub candidates: Vec<CandidateView>,
    pub type_distribution: Map<String, Value>,
    pub decoder: DecodeMode,
    pub latency_ms: f64,
}

type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

pub struct AppState {
    model: Arc<ModelBundle>,
    kb: Arc<KnowledgeBase>,
    emb: Arc<EntityEmbeddingTable>,
    config: PipelineConfig,
    model_hash: String,
    sessions: Mutex<LruCache<String, SessionHandle>>,
}

impl AppState {
    pub fn new(model: ModelBundle, kb: KnowledgeBase, config: PipelineConfig, model_hash: String) -> Self {
        let emb = precompute_embeddings(&kb, &model);
        Self {
            model: Arc::new(model),
            kb: Arc::new(kb),
            emb: Arc::new(emb),
            config,
            model_hash,
            sessions: Mutex::new(LruCache::new(NonZeroUsize::new(MAX_SESSIONS).expect("non-zero"))),
        }
    }

    /// Loads a checkpoint and knowledge base; the health hash is the checkpoint's SHA-256.
    pub fn load(ckpt: &Path, kb: &Path, config: PipelineConfig) -> anyhow::Result<Self> {
        let bytes = std::fs::read(ckpt)?;
        let hash = hex::encode(Sha256::digest(&bytes));
        let model = load_checkpoint(ckpt)?;
        let kb = load_kb(kb)?;
        corecog::eval::check_compatible(&model, &kb)?;
        Ok(Self::new(model, kb, config, hash))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map").len()
    }

    fn session(&self, id: &str) -> Result<SessionHandle, ServiceError> {
        self.sessions.lock().expect("session map").get(id).cloned().ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }
}

pub fn router(state: Arc<AppState>, allow_origin: Option<&str>) -> anyhow::Result<Router> {
    let mut app = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/session", post(create_session))
        .route("/v1/session/{id}/message", post(post_message))
        .route("/v1/session/{id}/history", get(get_history))
        .route("/v1/kb/entities", get(list_entities))
        .with_state(state);
    if let Some(origin) = allow_origin {
        let origin = if origin == "*" { AllowOrigin::any() } else { AllowOrigin::exact(HeaderValue::from_str(origin)?) };
        app = app.layer(
            CorsLayer::new()
                .allow_origin(origin)
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([axum::http::header::CONTENT_TYPE]),
        );
    }
    Ok(app)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "status": "ok", "model": state.model_hash }))
}

fn parse_body<T: for<'de> Deserialize<'de> + Default>(body: &str) -> Result<T, ServiceError> {
    if body.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(body).map_err(|e| ServiceError::BadBody(e.to_string()))
}

#[derive(Default, Deserialize)]
struct CreateSession {
    decoder: Option<String>,
}

async fn create_session(State(state): State<Arc<AppState>>, body: String) -> Result<(StatusCode, Json<Value>), ServiceError> {
    let req: CreateSession = parse_body(&body)?;
    let decoder = match req.decoder {
        Some(name) => name.parse::<DecodeMode>().map_err(|_| ServiceError::UnknownDecoder(name))?,
        None => DecodeMode::Hopskip,
    };
    let id = uuid::Uuid::new_v4().simple().to_string();
    let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let session = Session { id: id.clone(), history: DialogHistory::default(), decoder, created_at, transcript: vec![] };
    state.sessions.lock().expect("session map").put(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    log::info!("session {id} created with decoder {decoder}");
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id, "decoder": decoder }))))
}

#[derive(Default, Deserialize)]
struct PostMessage {
    #[serde(default)]
    text: String,
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: String,
) -> Result<Json<MessageResponse>, ServiceError> {
    let handle = state.session(&id)?;
    let req: PostMessage = parse_body(&body)?;
    let text = req.text.trim().to_string();
    if text.is_empty() {
        return Err(ServiceError::InvalidText("text must not be empty".into()));
    }
    if text.chars().count() > MAX_MESSAGE_CHARS {
        return Err(ServiceError::InvalidText(format!("text exceeds {MAX_MESSAGE_CHARS} characters")));
    }
    // held across the decode so turns within a session stay ordered
    let mut session = handle.lock().await;
    let started = Instant::now();
    let history = session.history.clone();
    let mut cfg = state.config.clone();
    cfg.decoder.mode = session.decoder;
    let worker = Arc::clone(&state);
    let user_text = text.clone();
    let decision = tokio::task::spawn_blocking(move || respond(&worker.model, &worker.kb, &worker.emb, &history, &user_text, &cfg))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
        .map_err(|e| ServiceError::Internal(e.to_string()))?;

    let kb = &state.kb;
    let entity = decision.chosen.map(|e| {
        let ent = kb.entity(e).expect("chosen entity is in the kb");
        EntityView { id: e.0, name: ent.name.clone(), type_name: kb.types()[ent.type_id].clone() }
    });
    let user = Turn::from_text(Speaker::User, &text, state.model.vocab(), kb);
    let agent = decision.agent_turn(&state.model, kb);
    session.history.turns.push(user);
    session.history.turns.push(agent);
    session.transcript.push(TurnView { speaker: Speaker::User, text, entity: None });
    session.transcript.push(TurnView { speaker: Speaker::Agent, text: decision.utterance.clone(), entity: entity.clone() });
    let response = MessageResponse {
        reply: decision.utterance,
        triggered: decision.triggered,
        entity,
        candidates: decision
            .candidates
            .into_iter()
            .map(|c| CandidateView { id: c.id.0, name: c.name, type_name: c.type_name, score: c.score })
            .collect(),
        type_distribution: decision.type_distribution.into_iter().map(|(t, p)| (t, json!(p))).collect(),
        decoder: decision.decoder_used,
        latency_ms: started.elapsed().as_secs_f64() * 1000.0,
    };
    Ok(Json(response))
}

async fn get_history(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ServiceError> {
    let handle = state.session(&id)?;
    let session = handle.lock().await;
    Ok(Json(json!({ "session_id": session.id, "decoder": session.decoder, "created_at": session.created_at, "turns": session.transcript })))
}

#[derive(Deserialize)]
struct EntityQuery {
    #[serde(rename = "type")]
    type_name: Option<String>,
}

async fn list_entities(State(state): State<Arc<AppState>>, Query(q): Query<EntityQuery>) -> Result<Json<Value>, ServiceError> {
    let kb = &state.kb;
    let ids = match &q.type_name {
        Some(t) => {
            let type_id = kb.type_id(t).ok_or_else(|| ServiceError::UnknownType(t.clone()))?;
            entities_of_type(kb, type_id).map_err(|e| ServiceError::Internal(e.to_string()))?.to_vec()
        }
        None => kb.all_entity_ids(),
    };
    let entities: Vec<Value> = ids
        .into_iter()
        .map(|id| {
            let e = kb.entity(id).expect("listed ids are in the kb");
            let attributes: Map<String, Value> = e.attributes.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
            json!({ "id": id.0, "name": e.name, "type": kb.types()[e.type_id], "attributes": attributes })
        })
        .collect();
    Ok(Json(json!({ "entities": entities })))
}
