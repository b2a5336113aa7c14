//! Wire messages. Every message is one JSON text frame with a `type` tag.
//!
//! Client to server:
//!
//! ```json
//! {"type": "hello", "protocol_version": 1, "role": "observer"}
//! {"type": "frames", "frames": [{"t": 0.01, "gyro_arm": [0, 0, 0], ...}]}
//! {"type": "control", "action": "reset"}
//! {"type": "control", "action": "start", "bundle": "fda"}
//! ```
//!
//! Server to client: `hello` once on connect (and in answer to a client
//! hello), `events` for every engine output and heartbeat, `error` for
//! problems with one client's request.

use reach_core::engine::EngineEvent;
use reach_core::frame::SampleFrame;
use reach_core::fsm::FsmConfig;
use serde::{Deserialize, Serialize};

/// Bumped together with the bundle format.
pub const PROTOCOL_VERSION: u32 = reach_core::store::BUNDLE_FORMAT_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Producer,
    Observer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    /// (Re)creates the engine, optionally with another bundle.
    Start,
    /// Drops the engine; frames are refused until the next start.
    Stop,
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello {
        protocol_version: u32,
        #[serde(default)]
        role: Role,
    },
    Frames {
        frames: Vec<SampleFrame>,
    },
    Control {
        action: ControlAction,
        #[serde(default)]
        bundle: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session: String,
    pub running: bool,
    pub bundle: Option<String>,
    pub n_classes: Option<usize>,
    pub fsm: Option<FsmConfig>,
    pub available_bundles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        protocol_version: u32,
        #[serde(flatten)]
        info: SessionInfo,
    },
    /// Engine output for one inbound batch, or a heartbeat / control result.
    Events {
        events: Vec<EngineEvent>,
        /// Processing time of the frame batch that produced these events.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        latency_ns: Option<u64>,
    },
    Error {
        message: String,
    },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialise")
    }
}
