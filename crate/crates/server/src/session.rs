//! One task per session owns the engine; connections talk to it by message.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use log::{info, warn};
use reach_core::engine::{EngineEvent, SessionEngine};
use reach_core::frame::SampleFrame;
use reach_core::store::ModelBundle;
use tokio::sync::{broadcast, mpsc};

use crate::protocol::{ControlAction, ServerMessage, SessionInfo};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bundles: BTreeMap<String, ModelBundle>,
    /// Bundle a new session starts with; `None` leaves new sessions stopped.
    pub default_bundle: Option<String>,
    pub heartbeat: Duration,
    /// Capacity of each session's broadcast ring; slow observers past it
    /// are told how many messages they missed.
    pub broadcast_capacity: usize,
}

impl ServerConfig {
    pub fn single(name: &str, bundle: ModelBundle) -> Self {
        ServerConfig {
            bundles: BTreeMap::from([(name.to_string(), bundle)]),
            default_bundle: Some(name.to_string()),
            heartbeat: Duration::from_secs(1),
            broadcast_capacity: 4096,
        }
    }
}

/// Requests a connection can make; replies meant only for the requester go
/// through `reply`.
pub(crate) enum Command {
    Info {
        reply: mpsc::UnboundedSender<ServerMessage>,
    },
    Frames {
        frames: Vec<SampleFrame>,
        reply: mpsc::UnboundedSender<ServerMessage>,
    },
    Control {
        action: ControlAction,
        bundle: Option<String>,
        reply: mpsc::UnboundedSender<ServerMessage>,
    },
}

#[derive(Clone)]
pub(crate) struct SessionHandle {
    pub commands: mpsc::UnboundedSender<Command>,
    pub events: broadcast::Sender<Arc<str>>,
}

struct Session {
    name: String,
    config: Arc<ServerConfig>,
    engine: Option<SessionEngine>,
    bundle: Option<String>,
    events: broadcast::Sender<Arc<str>>,
}

impl Session {
    fn info(&self) -> SessionInfo {
        let bundle = self.engine.as_ref().map(|e| e.bundle());
        SessionInfo {
            session: self.name.clone(),
            running: self.engine.is_some(),
            bundle: self.bundle.clone(),
            n_classes: bundle.map(|b| b.n_classes()),
            fsm: bundle.map(|b| b.fsm),
            available_bundles: self.config.bundles.keys().cloned().collect(),
        }
    }

    fn publish(&self, msg: &ServerMessage) {
        // No subscribers is fine; the session keeps running headless.
        let _ = self.events.send(Arc::from(msg.to_json()));
    }

    fn start(&mut self, name: Option<String>) -> Result<(), String> {
        let name = name
            .or_else(|| self.bundle.clone())
            .or_else(|| self.config.default_bundle.clone())
            .ok_or("no bundle named and no default bundle configured")?;
        let bundle = self
            .config
            .bundles
            .get(&name)
            .ok_or_else(|| format!("unknown bundle '{name}'"))?;
        let engine = SessionEngine::new(bundle.clone()).map_err(|e| e.to_string())?;
        info!("session {}: started with bundle {name}", self.name);
        let first = engine.state_event();
        self.engine = Some(engine);
        self.bundle = Some(name);
        self.publish(&ServerMessage::Events {
            events: vec![first],
            latency_ns: None,
        });
        Ok(())
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Info { reply } => {
                let _ = reply.send(ServerMessage::Hello {
                    protocol_version: crate::protocol::PROTOCOL_VERSION,
                    info: self.info(),
                });
            }
            Command::Frames { frames, reply } => {
                let Some(engine) = self.engine.as_mut() else {
                    let _ = reply.send(ServerMessage::Error {
                        message: "session is stopped; send a start control first".into(),
                    });
                    return;
                };
                let mut events: Vec<EngineEvent> = Vec::new();
                let mut latency = 0u64;
                for f in &frames {
                    let batch = engine.ingest_timed(f);
                    latency += batch.latency_ns;
                    events.extend(batch.events);
                }
                if !events.is_empty() {
                    self.publish(&ServerMessage::Events {
                        events,
                        latency_ns: Some(latency),
                    });
                }
            }
            Command::Control { action, bundle, reply } => match action {
                ControlAction::Start => {
                    if let Err(message) = self.start(bundle) {
                        let _ = reply.send(ServerMessage::Error { message });
                    }
                }
                ControlAction::Stop => {
                    self.engine = None;
                    info!("session {}: stopped", self.name);
                    let _ = reply.send(ServerMessage::Hello {
                        protocol_version: crate::protocol::PROTOCOL_VERSION,
                        info: self.info(),
                    });
                }
                ControlAction::Reset => match self.engine.as_mut() {
                    Some(engine) => {
                        let events = engine.reset();
                        self.publish(&ServerMessage::Events { events, latency_ns: None });
                    }
                    None => {
                        let _ = reply.send(ServerMessage::Error {
                            message: "session is stopped; nothing to reset".into(),
                        });
                    }
                },
            },
        }
    }

    fn heartbeat(&self) {
        if let Some(engine) = &self.engine {
            self.publish(&ServerMessage::Events {
                events: vec![engine.state_event()],
                latency_ns: None,
            });
        }
    }
}

/// Spawns the session task and returns its handle.
pub(crate) fn spawn_session(name: String, config: Arc<ServerConfig>) -> SessionHandle {
    let (tx, mut rx) = mpsc::unbounded_channel::<Command>();
    let (events, _) = broadcast::channel(config.broadcast_capacity.max(16));
    let mut session = Session {
        name,
        config: config.clone(),
        engine: None,
        bundle: None,
        events: events.clone(),
    };
    if config.default_bundle.is_some() {
        if let Err(e) = session.start(None) {
            warn!("session {}: default bundle failed to load: {e}", session.name);
        }
    }
    tokio::spawn(async move {
        let mut ticker = tokio::time::interval(config.heartbeat);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        ticker.tick().await;
        loop {
            tokio::select! {
                cmd = rx.recv() => match cmd {
                    Some(cmd) => session.handle(cmd),
                    None => break,
                },
                _ = ticker.tick() => session.heartbeat(),
            }
        }
    });
    SessionHandle { commands: tx, events }
}
