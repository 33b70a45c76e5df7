//! Wire messages shared by both framings.
//!
//! Every frame is one UTF-8 JSON object. Server frames carry a
//! per-connection `seq` that increases by one per frame:
//!
//! ```json
//! {"v":1,"seq":7,"kind":"state_snapshot","payload":{...},"reply_to":"c-3"}
//! ```
//!
//! Clients send `command` or `annotation_event` frames, optionally tagged
//! with an `id` that the server echoes as `reply_to` on the paired reply:
//!
//! ```json
//! {"v":1,"kind":"command","id":"c-3","payload":{"type":"load_volume"}}
//! ```

use std::fmt;

use holonav_core::geometry::{Point3, RigidTransform};
use holonav_core::session::{Annotation, Command, Rejection, SessionSnapshot};
use holonav_core::tracking::TrackingSample;
use holonav_core::volume::Ellipsoid;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    StateSnapshot,
    TrackingSample,
    AnnotationEvent,
    Command,
    CommandRejected,
    Error,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

/// A server frame as seen by a client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerMessage {
    pub v: u32,
    pub seq: u64,
    pub kind: MessageKind,
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_to: Option<String>,
}

/// Borrowing form used by the server so one payload can be fanned out to
/// many connections without cloning it.
#[derive(Serialize)]
pub(crate) struct OutFrame<'a> {
    pub v: u32,
    pub seq: u64,
    pub kind: MessageKind,
    pub payload: &'a Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reply_to: Option<&'a str>,
}

#[derive(Deserialize)]
struct ClientEnvelope {
    v: Option<u32>,
    kind: MessageKind,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    payload: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClientMessage {
    Command { id: Option<String>, command: Command },
    Annotation { id: Option<String>, annotation: Annotation },
}

impl ClientMessage {
    pub fn id(&self) -> Option<&str> {
        match self {
            ClientMessage::Command { id, .. } | ClientMessage::Annotation { id, .. } => id.as_deref(),
        }
    }
}

/// Why a client frame was refused. `reply_to` is filled whenever the frame
/// was well-formed enough to carry an id.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolError {
    pub message: String,
    pub reply_to: Option<String>,
}

impl fmt::Display for ProtocolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn parse_client_message(text: &str) -> Result<ClientMessage, ProtocolError> {
    let fail = |message: String, reply_to: Option<String>| ProtocolError { message, reply_to };
    let env: ClientEnvelope =
        serde_json::from_str(text.trim_end_matches('\r')).map_err(|e| fail(format!("malformed frame: {e}"), None))?;
    let id = env.id;
    match env.v {
        Some(PROTOCOL_VERSION) => {}
        Some(v) => return Err(fail(format!("unsupported protocol version {v}"), id)),
        None => return Err(fail("missing protocol version field v".into(), id)),
    }
    match env.kind {
        MessageKind::Command => serde_json::from_value(env.payload)
            .map(|command| ClientMessage::Command { id: id.clone(), command })
            .map_err(|e| fail(format!("bad command payload: {e}"), id)),
        MessageKind::AnnotationEvent => serde_json::from_value(env.payload)
            .map(|annotation| ClientMessage::Annotation { id: id.clone(), annotation })
            .map_err(|e| fail(format!("bad annotation payload: {e}"), id)),
        other => Err(fail(format!("clients may not send {other} messages"), id)),
    }
}

fn client_frame(kind: MessageKind, id: Option<&str>, payload: Value) -> String {
    let mut obj = serde_json::json!({ "v": PROTOCOL_VERSION, "kind": kind, "payload": payload });
    if let Some(id) = id {
        obj["id"] = Value::from(id);
    }
    obj.to_string()
}

/// Encodes a client command frame (no trailing newline).
pub fn encode_command(id: Option<&str>, command: &Command) -> String {
    client_frame(MessageKind::Command, id, serde_json::to_value(command).expect("commands serialize"))
}

pub fn encode_annotation(id: Option<&str>, annotation: &Annotation) -> String {
    client_frame(
        MessageKind::AnnotationEvent,
        id,
        serde_json::to_value(annotation).expect("annotations serialize"),
    )
}

/// Static scene description the console needs to draw the phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    /// Volume extent in patient coordinates, `[min, max]`.
    pub volume_bounds: [Point3; 2],
    pub tumor: Option<Ellipsoid>,
    /// Nose bridge, left ear, right ear, world frame.
    pub anchor_points_world: [Point3; 3],
    pub pivot_world: Point3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPayload {
    #[serde(flatten)]
    pub session: SessionSnapshot,
    pub scene: SceneInfo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingPayload {
    #[serde(flatten)]
    pub sample: TrackingSample,
    /// Overlay placement for glasses samples once the session is registered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_from_patient: Option<RigidTransform>,
}

pub type RejectionPayload = Rejection;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub message: String,
}
