//! HTTP and WebSocket surface of the session service.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::rejection::JsonRejection;
use axum::extract::ws::rejection::WebSocketUpgradeRejection;
use axum::extract::{Path, State};
use axum::response::Response;
use axum::routing::{get, post};
use axum::{Json, Router};
use bcomm_core::atlas::EmbeddingAtlas;
use bcomm_core::checkpoint::CheckpointManifest;
use serde::Deserialize;
use tokio::sync::broadcast::error::RecvError;

use crate::error::GatewayError;
use crate::registry::Registry;
use crate::session::{apply_env_overrides, MessageMode, Session, SessionView, StepOutcome};
use crate::store::SessionStore;

pub struct AppState {
    pub registry: Registry,
    pub sessions: SessionStore,
}

impl AppState {
    pub fn new(registry: Registry, idle_timeout: Duration) -> Arc<Self> {
        Arc::new(Self {
            registry,
            sessions: SessionStore::new(idle_timeout),
        })
    }
}

/// Per-agent modes, either a full list or a sparse map defaulting to agent.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ModeSpec {
    List(Vec<MessageMode>),
    /// Keys are agent indices.
    Map(BTreeMap<String, MessageMode>),
}

impl ModeSpec {
    fn resolve(&self, n: usize) -> Result<Vec<MessageMode>, GatewayError> {
        match self {
            ModeSpec::List(v) => Ok(v.clone()),
            ModeSpec::Map(m) => {
                let mut modes = vec![MessageMode::Agent; n];
                for (key, &mode) in m {
                    let agent = key
                        .parse::<usize>()
                        .ok()
                        .filter(|&a| a < n)
                        .ok_or_else(|| GatewayError::BadRequest(format!("agent {key:?} does not exist")))?;
                    modes[agent] = mode;
                }
                Ok(modes)
            }
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub checkpoint_id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub modes: Option<ModeSpec>,
    #[serde(default)]
    pub env_overrides: serde_json::Value,
}

#[derive(Debug, Deserialize)]
pub struct StepRequest {
    #[serde(default)]
    pub human_messages: BTreeMap<usize, u64>,
    #[serde(default)]
    pub step_index: Option<usize>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_state))
        .route("/sessions/{id}/step", post(step_session))
        .route("/sessions/{id}/ws", get(session_ws))
        .route("/atlas/{checkpoint_id}", get(atlas))
        .route("/checkpoints", get(checkpoints))
        .with_state(state)
}

fn rejected(e: JsonRejection) -> GatewayError {
    GatewayError::BadRequest(e.body_text())
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, GatewayError> + Send + 'static,
) -> Result<T, GatewayError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| GatewayError::Internal(e.to_string()))?
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<Json<SessionView>, GatewayError> {
    let Json(req) = body.map_err(rejected)?;
    blocking(move || {
        let checkpoint = app.registry.checkpoint(&req.checkpoint_id)?;
        let atlas = app.registry.atlas(&req.checkpoint_id)?;
        let env = apply_env_overrides(&checkpoint.manifest.env, &req.env_overrides)?;
        let n = checkpoint.policy.arch.n_agents;
        let modes = match &req.modes {
            Some(m) => m.resolve(n)?,
            None => vec![MessageMode::Agent; n],
        };
        let session = Session::new(SessionStore::new_id(), checkpoint, atlas, env, modes, req.seed)?;
        let view = session.view()?;
        app.sessions.insert(session);
        Ok(Json(view))
    })
    .await
}

async fn session_state(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<SessionView>, GatewayError> {
    blocking(move || app.sessions.get(&id)?.view().map(Json)).await
}

async fn step_session(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<StepRequest>, JsonRejection>,
) -> Result<Json<StepOutcome>, GatewayError> {
    let Json(req) = body.map_err(rejected)?;
    blocking(move || {
        let entry = app.sessions.get(&id)?;
        let out = entry.step(|s| s.step(&req.human_messages, req.step_index))?;
        Ok(Json((*out).clone()))
    })
    .await
}

async fn session_ws(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    upgrade: Result<WebSocketUpgrade, WebSocketUpgradeRejection>,
) -> Result<Response, GatewayError> {
    let entry = app.sessions.get(&id)?;
    let upgrade = upgrade.map_err(|e| GatewayError::BadRequest(e.body_text()))?;
    let updates = entry.subscribe();
    Ok(upgrade.on_upgrade(move |socket| push_steps(socket, updates)))
}

/// Forward every step result to the client until either side goes away.
async fn push_steps(mut socket: WebSocket, mut updates: tokio::sync::broadcast::Receiver<Arc<StepOutcome>>) {
    loop {
        tokio::select! {
            update = updates.recv() => match update {
                Ok(out) => {
                    let text = match serde_json::to_string(&*out) {
                        Ok(t) => t,
                        Err(e) => {
                            tracing::error!("serializing step result: {e}");
                            break;
                        }
                    };
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                Err(RecvError::Lagged(skipped)) => {
                    tracing::warn!("websocket client lagged by {skipped} steps");
                }
                Err(RecvError::Closed) => break,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}

async fn atlas(
    State(app): State<Arc<AppState>>,
    Path(checkpoint_id): Path<String>,
) -> Result<Json<EmbeddingAtlas>, GatewayError> {
    blocking(move || {
        let atlas = app
            .registry
            .atlas(&checkpoint_id)?
            .ok_or_else(|| GatewayError::NotFound(format!("checkpoint {checkpoint_id:?} has no atlas")))?;
        Ok(Json((*atlas).clone()))
    })
    .await
}

async fn checkpoints(State(app): State<Arc<AppState>>) -> Result<Json<Vec<CheckpointManifest>>, GatewayError> {
    blocking(move || app.registry.list().map(Json)).await
}

/// Serve until ctrl-c, sweeping idle sessions once a minute.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let gone = sweeper.sessions.expire();
            if gone > 0 {
                tracing::info!("expired {gone} idle sessions");
            }
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
