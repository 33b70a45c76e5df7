//! Navigation session: a strictly forward workflow state machine with an
//! append-only event log, overlay computation, and annotations.
//!
//! Every accepted mutation becomes a [`LogEntry`]. The log is the source of
//! truth: replaying it from an empty session reproduces the session.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform, Vec3};
use crate::registration::{FiducialSet, RegistrationResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SessionState {
    Idle,
    VolumeLoaded,
    FiducialsDetected,
    PointerCalibrated,
    Registered,
    Navigating,
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlineKind {
    #[default]
    Polyline,
    RiskZone,
}

/// The operator command set: what gestures and virtual buttons resolve to.
///
/// Workflow commands may carry the data produced by the step they confirm
/// (detected fiducials, tip offset, registration). A driver that owns the
/// imaging and tracking pipeline fills these in before the command is
/// applied, so the log alone is enough to replay the session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Command {
    LoadVolume {
        #[serde(default)]
        source: String,
    },
    DetectFiducials {
        #[serde(default)]
        fiducials: Option<FiducialSet>,
    },
    Calibrate {
        #[serde(default)]
        tip_offset: Option<Vec3>,
    },
    Register {
        #[serde(default)]
        registration: Option<RegistrationResult>,
    },
    StartNavigation,
    ToggleModelVisibility,
    SetOpacity {
        value: f64,
    },
    MarkPoint {
        point: Point3,
        #[serde(default)]
        label: String,
    },
    BeginOutline {
        #[serde(default)]
        label: String,
        #[serde(default)]
        kind: OutlineKind,
    },
    AppendOutline {
        point: Point3,
    },
    EndOutline,
    Reset,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::LoadVolume { .. } => "LoadVolume",
            Command::DetectFiducials { .. } => "DetectFiducials",
            Command::Calibrate { .. } => "Calibrate",
            Command::Register { .. } => "Register",
            Command::StartNavigation => "StartNavigation",
            Command::ToggleModelVisibility => "ToggleModelVisibility",
            Command::SetOpacity { .. } => "SetOpacity",
            Command::MarkPoint { .. } => "MarkPoint",
            Command::BeginOutline { .. } => "BeginOutline",
            Command::AppendOutline { .. } => "AppendOutline",
            Command::EndOutline => "EndOutline",
            Command::Reset => "Reset",
        }
    }

    pub fn load_volume() -> Self {
        Command::LoadVolume { source: String::new() }
    }

    pub fn detect_fiducials() -> Self {
        Command::DetectFiducials { fiducials: None }
    }

    pub fn calibrate() -> Self {
        Command::Calibrate { tip_offset: None }
    }

    pub fn register(registration: RegistrationResult) -> Self {
        Command::Register {
            registration: Some(registration),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationKind {
    Point,
    Polyline,
    RiskZone,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Author {
    Local,
    Remote,
}

/// Marks in the patient frame, so they survive re-registration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub kind: AnnotationKind,
    pub points: Vec<Point3>,
    #[serde(default)]
    pub label: String,
    pub author: Author,
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::invalid("annotation id must not be empty"));
        }
        if let Some(p) = self.points.iter().find(|p| !p.is_finite()) {
            return Err(Error::invalid(format!("non-finite annotation point {p:?}")));
        }
        let n = self.points.len();
        let ok = match self.kind {
            AnnotationKind::Point => n == 1,
            AnnotationKind::Polyline => n >= 2,
            AnnotationKind::RiskZone => n >= 3,
        };
        if !ok {
            return Err(Error::invalid(format!("{:?} annotation cannot have {n} points", self.kind)));
        }
        Ok(())
    }
}

/// Sum of consecutive segment lengths of an open polyline.
pub fn outline_length(a: &Annotation) -> Result<f64> {
    if a.kind != AnnotationKind::Polyline {
        return Err(Error::invalid(format!("outline length needs a polyline, got {:?}", a.kind)));
    }
    Ok(a.points.windows(2).map(|w| w[0].distance(&w[1])).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Command { command: Command },
    RemoteAnnotation { annotation: Annotation },
}

/// One line of the session log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
    #[serde(flatten)]
    pub event: SessionEvent,
}

impl LogEntry {
    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("log entries always serialize");
        s.push('\n');
        s
    }
}

/// A command refused by the state machine. Not an error: the session is
/// unchanged and keeps running.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub state: SessionState,
    pub command: String,
    pub reason: String,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} rejected in state {}: {}", self.command, self.state, self.reason)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("log is missing seq {expected} (found {found})")]
    SeqGap { expected: u64, found: u64 },
    #[error("log entry {seq} cannot be applied: {reason}")]
    Rejected { seq: u64, reason: String },
    #[error("log line {line} is malformed: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingOutline {
    pub label: String,
    pub kind: OutlineKind,
    pub points: Vec<Point3>,
}

/// Everything but the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub state: SessionState,
    pub volume_source: Option<String>,
    pub fiducials: Option<FiducialSet>,
    pub tip_offset: Option<Vec3>,
    pub registration: Option<RegistrationResult>,
    pub model_visible: bool,
    pub opacity: f64,
    pub annotations: Vec<Annotation>,
    pub pending_outline: Option<PendingOutline>,
    pub next_local_annotation: u64,
    /// Sequence number of the last applied log entry, 0 when none.
    pub last_seq: u64,
}

impl Default for SessionSnapshot {
    fn default() -> Self {
        SessionSnapshot {
            state: SessionState::Idle,
            volume_source: None,
            fiducials: None,
            tip_offset: None,
            registration: None,
            model_visible: true,
            opacity: 1.0,
            annotations: Vec::new(),
            pending_outline: None,
            next_local_annotation: 1,
            last_seq: 0,
        }
    }
}

impl SessionSnapshot {
    fn require(&self, allowed: &[SessionState]) -> std::result::Result<(), String> {
        if allowed.contains(&self.state) {
            Ok(())
        } else {
            let names: Vec<String> = allowed.iter().map(|s| s.to_string()).collect();
            Err(format!("requires {}", names.join(" or ")))
        }
    }

    fn require_volume(&self) -> std::result::Result<(), String> {
        if self.state == SessionState::Idle {
            Err("requires a loaded volume".into())
        } else {
            Ok(())
        }
    }

    fn next_local_id(&mut self) -> String {
        let id = format!("local-{}", self.next_local_annotation);
        self.next_local_annotation += 1;
        id
    }

    fn apply_command(&mut self, cmd: &Command) -> std::result::Result<(), String> {
        use SessionState::*;
        match cmd {
            Command::LoadVolume { source } => {
                self.require(&[Idle])?;
                self.volume_source = Some(source.clone());
                self.state = VolumeLoaded;
            }
            Command::DetectFiducials { fiducials } => {
                self.require(&[VolumeLoaded])?;
                self.fiducials = fiducials.clone();
                self.state = FiducialsDetected;
            }
            Command::Calibrate { tip_offset } => {
                self.require(&[FiducialsDetected])?;
                if tip_offset.is_some_and(|t| !t.is_finite()) {
                    return Err("tip offset must be finite".into());
                }
                self.tip_offset = *tip_offset;
                self.state = PointerCalibrated;
            }
            Command::Register { registration } => {
                self.require(&[PointerCalibrated])?;
                let r = registration
                    .as_ref()
                    .ok_or_else(|| "requires a registration result".to_string())?;
                self.registration = Some(r.clone());
                self.state = Registered;
            }
            Command::StartNavigation => {
                self.require(&[Registered])?;
                self.state = Navigating;
            }
            Command::ToggleModelVisibility => {
                self.require_volume()?;
                self.model_visible = !self.model_visible;
            }
            Command::SetOpacity { value } => {
                self.require_volume()?;
                if !(0.0..=1.0).contains(value) {
                    return Err(format!("opacity {value} outside [0, 1]"));
                }
                self.opacity = *value;
            }
            Command::MarkPoint { point, label } => {
                self.require_volume()?;
                let a = Annotation {
                    id: self.next_local_id(),
                    kind: AnnotationKind::Point,
                    points: vec![*point],
                    label: label.clone(),
                    author: Author::Local,
                };
                a.validate().map_err(|e| e.to_string())?;
                self.annotations.push(a);
            }
            Command::BeginOutline { label, kind } => {
                self.require_volume()?;
                if self.pending_outline.is_some() {
                    return Err("an outline is already in progress".into());
                }
                self.pending_outline = Some(PendingOutline {
                    label: label.clone(),
                    kind: *kind,
                    points: Vec::new(),
                });
            }
            Command::AppendOutline { point } => {
                if !point.is_finite() {
                    return Err("outline point must be finite".into());
                }
                let pending = self
                    .pending_outline
                    .as_mut()
                    .ok_or_else(|| "requires an outline in progress".to_string())?;
                pending.points.push(*point);
            }
            Command::EndOutline => {
                let pending = self
                    .pending_outline
                    .as_ref()
                    .ok_or_else(|| "requires an outline in progress".to_string())?;
                let kind = match pending.kind {
                    OutlineKind::Polyline => AnnotationKind::Polyline,
                    OutlineKind::RiskZone => AnnotationKind::RiskZone,
                };
                let mut a = Annotation {
                    id: String::new(),
                    kind,
                    points: pending.points.clone(),
                    label: pending.label.clone(),
                    author: Author::Local,
                };
                a.id = "pending".into();
                a.validate().map_err(|e| e.to_string())?;
                a.id = self.next_local_id();
                self.annotations.push(a);
                self.pending_outline = None;
            }
            Command::Reset => {
                // Annotations live in patient coordinates and are kept.
                *self = SessionSnapshot {
                    annotations: std::mem::take(&mut self.annotations),
                    next_local_annotation: self.next_local_annotation,
                    model_visible: self.model_visible,
                    opacity: self.opacity,
                    last_seq: self.last_seq,
                    ..SessionSnapshot::default()
                };
            }
        }
        Ok(())
    }

    /// `Ok(false)` when the id is already present.
    fn apply_remote(&mut self, annotation: &Annotation) -> std::result::Result<bool, String> {
        self.require(&[SessionState::Navigating])?;
        if annotation.author != Author::Remote {
            return Err("remote annotations must have author remote".into());
        }
        annotation.validate().map_err(|e| e.to_string())?;
        if self.annotations.iter().any(|a| a.id == annotation.id) {
            return Ok(false);
        }
        self.annotations.push(annotation.clone());
        Ok(true)
    }

    fn apply_event(&mut self, event: &SessionEvent) -> std::result::Result<(), String> {
        match event {
            SessionEvent::Command { command } => self.apply_command(command),
            SessionEvent::RemoteAnnotation { annotation } => match self.apply_remote(annotation)? {
                true => Ok(()),
                false => Err(format!("duplicate annotation id {}", annotation.id)),
            },
        }
    }
}

/// Outcome of offering a remote annotation.
#[derive(Clone, Debug, PartialEq)]
pub enum RemoteOutcome {
    /// New annotation; the entry must be logged and broadcast.
    Accepted(LogEntry),
    /// Same id already present; nothing to do.
    Duplicate,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Session {
    snapshot: SessionSnapshot,
    log: Vec<LogEntry>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl Session {
    pub fn new() -> Self {
        Session::default()
    }

    pub fn state(&self) -> SessionState {
        self.snapshot.state
    }

    pub fn snapshot(&self) -> &SessionSnapshot {
        &self.snapshot
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.snapshot.annotations
    }

    pub fn registration(&self) -> Option<&RegistrationResult> {
        self.snapshot.registration.as_ref()
    }

    fn next_seq(&self) -> u64 {
        self.snapshot.last_seq + 1
    }

    /// Validates `cmd` against the current state without mutating and
    /// returns the log entry that would apply it.
    pub fn plan_command(&self, cmd: Command, timestamp: f64) -> std::result::Result<LogEntry, Rejection> {
        let mut trial = self.snapshot.clone();
        trial.apply_command(&cmd).map_err(|reason| Rejection {
            state: self.state(),
            command: cmd.name().to_string(),
            reason,
        })?;
        Ok(LogEntry {
            seq: self.next_seq(),
            timestamp,
            event: SessionEvent::Command { command: cmd },
        })
    }

    pub fn plan_remote_annotation(
        &self,
        annotation: Annotation,
        timestamp: f64,
    ) -> std::result::Result<RemoteOutcome, Rejection> {
        let mut trial = self.snapshot.clone();
        let fresh = trial.apply_remote(&annotation).map_err(|reason| Rejection {
            state: self.state(),
            command: "RemoteAnnotation".into(),
            reason,
        })?;
        if !fresh {
            return Ok(RemoteOutcome::Duplicate);
        }
        Ok(RemoteOutcome::Accepted(LogEntry {
            seq: self.next_seq(),
            timestamp,
            event: SessionEvent::RemoteAnnotation { annotation },
        }))
    }

    /// Applies a planned or replayed entry; sequence numbers must be contiguous.
    pub fn apply(&mut self, entry: LogEntry) -> std::result::Result<(), ReplayError> {
        let expected = self.next_seq();
        if entry.seq != expected {
            return Err(ReplayError::SeqGap {
                expected,
                found: entry.seq,
            });
        }
        let mut next = self.snapshot.clone();
        next.apply_event(&entry.event)
            .map_err(|reason| ReplayError::Rejected { seq: entry.seq, reason })?;
        next.last_seq = entry.seq;
        self.snapshot = next;
        self.log.push(entry);
        Ok(())
    }

    pub fn handle_command_at(&mut self, cmd: Command, timestamp: f64) -> std::result::Result<&LogEntry, Rejection> {
        let entry = self.plan_command(cmd, timestamp)?;
        self.apply(entry).expect("planned entry applies");
        Ok(self.log.last().expect("just pushed"))
    }

    pub fn handle_command(&mut self, cmd: Command) -> std::result::Result<&LogEntry, Rejection> {
        self.handle_command_at(cmd, unix_now())
    }

    /// Stores a remote annotation. Returns the new log entry, or `None` for
    /// a duplicate id (no change, nothing to broadcast).
    pub fn apply_remote_annotation(
        &mut self,
        mut annotation: Annotation,
    ) -> std::result::Result<Option<&LogEntry>, Rejection> {
        annotation.author = Author::Remote;
        match self.plan_remote_annotation(annotation, unix_now())? {
            RemoteOutcome::Duplicate => Ok(None),
            RemoteOutcome::Accepted(entry) => {
                self.apply(entry).expect("planned entry applies");
                Ok(self.log.last())
            }
        }
    }

    /// Placement of the patient-frame model in the viewer's frame:
    /// `view_from_patient = glasses_pose_world⁻¹ ∘ world_from_patient`.
    pub fn compute_overlay(&self, glasses_pose_world: &RigidTransform) -> Result<RigidTransform> {
        let allowed = matches!(self.state(), SessionState::Registered | SessionState::Navigating);
        match (&self.snapshot.registration, allowed) {
            (Some(r), true) => Ok(glasses_pose_world.inverse().compose(&r.world_from_patient)),
            _ => Err(Error::state(format!(
                "overlay requires Registered or Navigating, session is {}",
                self.state()
            ))),
        }
    }

    pub fn replay(entries: impl IntoIterator<Item = LogEntry>) -> std::result::Result<Session, ReplayError> {
        let mut s = Session::new();
        for e in entries {
            s.apply(e)?;
        }
        Ok(s)
    }
}

/// Parses a JSON-lines session log. A final line without its newline is a
/// torn write from an interrupted append and is dropped.
pub fn parse_log(text: &str) -> std::result::Result<Vec<LogEntry>, ReplayError> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReplayError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_log(path: impl AsRef<Path>) -> Result<Vec<LogEntry>> {
    let text = fs::read_to_string(path)?;
    parse_log(&text).map_err(|e| Error::format(e.to_string()))
}

pub fn replay_file(path: impl AsRef<Path>) -> Result<Session> {
    Session::replay(load_log(path)?).map_err(|e| Error::format(e.to_string()))
}
