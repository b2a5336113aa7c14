//! Streaming endpoint for live sessions.
//!
//! `GET /ws/{session}` upgrades to a WebSocket attached to the named session
//! (`/ws` uses the session `default`). Sessions are created on first use and
//! each runs its own engine task; any number of connections may feed or
//! observe one session. See [`protocol`] for the message schemas.

pub mod protocol;
mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use log::{debug, info};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc};

use protocol::{ClientMessage, Role, ServerMessage, PROTOCOL_VERSION};
pub use session::ServerConfig;
use session::{spawn_session, Command, SessionHandle};

#[derive(Clone)]
struct AppState {
    config: Arc<ServerConfig>,
    sessions: Arc<Mutex<HashMap<String, SessionHandle>>>,
}

impl AppState {
    fn session(&self, name: &str) -> SessionHandle {
        let mut map = self.sessions.lock().expect("session map poisoned");
        map.entry(name.to_string())
            .or_insert_with(|| spawn_session(name.to_string(), self.config.clone()))
            .clone()
    }
}

pub fn router(config: ServerConfig) -> Router {
    let state = AppState {
        config: Arc::new(config),
        sessions: Arc::default(),
    };
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/ws", get(ws_default))
        .route("/ws/{session}", get(ws_named))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, config: ServerConfig) -> std::io::Result<()> {
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(config)).await
}

/// Binds `addr` and serves; returns the bound address through `on_bound`
/// before blocking.
pub async fn bind_and_serve(
    addr: SocketAddr,
    config: ServerConfig,
    on_bound: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    serve(listener, config).await
}

async fn ws_default(ws: WebSocketUpgrade, State(state): State<AppState>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, state, "default".to_string()))
}

async fn ws_named(
    ws: WebSocketUpgrade,
    Path(session): Path<String>,
    State(state): State<AppState>,
) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, state, session))
}

async fn connection(socket: WebSocket, state: AppState, name: String) {
    let handle = state.session(&name);
    let mut events = handle.events.subscribe();
    let (reply_tx, mut replies) = mpsc::unbounded_channel::<ServerMessage>();
    let (mut sink, mut stream) = socket.split();
    let mut role = Role::Producer;
    debug!("connection attached to session {name}");

    let _ = handle.commands.send(Command::Info { reply: reply_tx.clone() });
    loop {
        let outbound: String = tokio::select! {
            incoming = stream.next() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Binary(_))) => {
                        let _ = reply_tx.send(error("binary frames are not part of the protocol; send JSON text"));
                        continue;
                    }
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                match serde_json::from_str::<ClientMessage>(text.as_str()) {
                    Ok(msg) => dispatch(msg, &handle, &reply_tx, &mut role),
                    Err(e) => { let _ = reply_tx.send(error(format!("malformed message: {e}"))); }
                }
                continue;
            }
            reply = replies.recv() => match reply {
                Some(m) => m.to_json(),
                None => break,
            },
            ev = events.recv() => match ev {
                Ok(text) => text.to_string(),
                Err(broadcast::error::RecvError::Lagged(n)) => error(format!("observer lagged; {n} messages dropped")).to_json(),
                Err(broadcast::error::RecvError::Closed) => break,
            },
        };
        if sink.send(Message::Text(outbound.into())).await.is_err() {
            break;
        }
    }
    debug!("connection left session {name}");
}

fn error(message: impl Into<String>) -> ServerMessage {
    ServerMessage::Error { message: message.into() }
}

fn dispatch(msg: ClientMessage, handle: &SessionHandle, reply: &mpsc::UnboundedSender<ServerMessage>, role: &mut Role) {
    let cmd = match msg {
        ClientMessage::Hello { protocol_version, role: r } => {
            if protocol_version != PROTOCOL_VERSION {
                let _ = reply.send(error(format!(
                    "protocol version {protocol_version} not supported (server speaks {PROTOCOL_VERSION})"
                )));
                return;
            }
            *role = r;
            Command::Info { reply: reply.clone() }
        }
        ClientMessage::Frames { .. } if *role == Role::Observer => {
            let _ = reply.send(error("observers cannot send frames"));
            return;
        }
        ClientMessage::Frames { frames } => Command::Frames {
            frames,
            reply: reply.clone(),
        },
        ClientMessage::Control { action, bundle } => Command::Control {
            action,
            bundle,
            reply: reply.clone(),
        },
    };
    let _ = handle.commands.send(cmd);
}
