//! WebSocket detection service. `GET /session` upgrades to a session
//! speaking the protocol in [`protocol`]; `GET /health` reports the model.

pub mod protocol;
pub mod session;

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use log::{debug, info};
use serde::Serialize;
use sha2::{Digest, Sha256};
use tokio::sync::mpsc;

use nvsd::events::PostProcConfig;
use nvsd::personalize::{NegativePool, PersonalizeConfig};
use nvsd::tcn::{write_weights, ModelWeights};

use protocol::ServerMessage;
use session::{Flow, Outbox, Session};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub postproc: PostProcConfig,
    pub personalize: PersonalizeConfig,
    /// Summaries buffered per session before new ones are dropped.
    pub summary_queue: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { postproc: PostProcConfig::default(), personalize: PersonalizeConfig::default(), summary_queue: 8 }
    }
}

pub struct AppState {
    pub weights: Arc<ModelWeights>,
    pub negatives: Arc<NegativePool>,
    pub config: ServiceConfig,
    pub model_version: String,
    next_session: AtomicU64,
    open_sessions: AtomicUsize,
}

impl AppState {
    pub fn new(weights: ModelWeights, negatives: NegativePool, config: ServiceConfig) -> nvsd::Result<Self> {
        config.postproc.validate()?;
        let mut bytes = Vec::new();
        write_weights(&weights, &mut bytes)?;
        let digest = Sha256::digest(&bytes);
        let model_version = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self {
            weights: Arc::new(weights),
            negatives: Arc::new(negatives),
            config,
            model_version,
            next_session: AtomicU64::new(1),
            open_sessions: AtomicUsize::new(0),
        })
    }
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    model_version: String,
    classes: Vec<String>,
    user_id: Option<String>,
    sessions: usize,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok",
        model_version: state.model_version.clone(),
        classes: state.weights.classes.names().to_vec(),
        user_id: state.weights.user_id.clone(),
        sessions: state.open_sessions.load(Ordering::Relaxed),
    })
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>) -> Response {
    ws.on_upgrade(move |socket| run_session(socket, state))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new().route("/health", get(health)).route("/session", get(upgrade)).with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn run_session(socket: WebSocket, state: Arc<AppState>) {
    let id = state.next_session.fetch_add(1, Ordering::Relaxed);
    state.open_sessions.fetch_add(1, Ordering::Relaxed);
    let (mut sink, mut stream) = socket.split();
    let (reliable_tx, mut reliable) = mpsc::unbounded_channel::<ServerMessage>();
    let (summary_tx, mut summaries) = mpsc::channel::<ServerMessage>(state.config.summary_queue.max(1));

    let writer = tokio::spawn(async move {
        loop {
            let msg = tokio::select! {
                biased;
                Some(m) = reliable.recv() => m,
                Some(m) = summaries.recv() => m,
                else => break,
            };
            let text = serde_json::to_string(&msg).expect("server messages serialize");
            if sink.send(Message::Text(text.into())).await.is_err() {
                return;
            }
        }
        let _ = sink.send(Message::Close(None)).await;
    });

    let out = Outbox { reliable: reliable_tx, summaries: summary_tx, dropped: 0 };
    let mut session = Session::new(id, state.clone(), out);
    debug!("session {id} opened");
    while let Some(msg) = stream.next().await {
        let flow = match msg {
            Ok(Message::Text(t)) => session.on_text(t.as_str()).await,
            Ok(Message::Binary(b)) => session.on_binary(&b),
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => Flow::Continue,
        };
        if flow == Flow::Close {
            break;
        }
    }
    debug!("session {id} closed, {} summaries dropped", session.dropped_summaries());
    drop(session);
    let _ = writer.await;
    state.open_sessions.fetch_sub(1, Ordering::Relaxed);
}
