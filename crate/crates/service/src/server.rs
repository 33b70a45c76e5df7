//! The live wire service.
//!
//! One owner task holds the session. Connection readers push frames into
//! its queue in arrival order; the owner validates, logs, applies and then
//! fans out replies through per-connection writer queues. Each writer
//! stamps its own `seq`, so every connection sees 1, 2, 3, ...

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use holonav_core::scene::Scene;
use holonav_core::session::{unix_now, Annotation, Author, Command, LogEntry, RemoteOutcome, Session};
use serde::Serialize;
use serde_json::Value;
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;
use tracing::{debug, info, warn};

use crate::config::ServiceConfig;
use crate::persist::LogSink;
use crate::pipeline::Pipeline;
use crate::protocol::{
    parse_client_message, ClientMessage, ErrorPayload, MessageKind, OutFrame, SnapshotPayload, PROTOCOL_VERSION,
};

/// Largest accepted client frame in bytes.
pub const MAX_FRAME_BYTES: usize = 1 << 20;
/// Frames a slow client may fall behind before it is disconnected.
const OUTBOX_CAPACITY: usize = 4096;
const INBOX_CAPACITY: usize = 1024;

type ConnId = u64;

/// One frame addressed to one connection; the payload is shared between
/// all recipients.
#[derive(Debug)]
struct Outgoing {
    kind: MessageKind,
    payload: Arc<Value>,
    reply_to: Option<String>,
}

impl Outgoing {
    fn encode(&self, seq: u64) -> String {
        serde_json::to_string(&OutFrame {
            v: PROTOCOL_VERSION,
            seq,
            kind: self.kind,
            payload: &self.payload,
            reply_to: self.reply_to.as_deref(),
        })
        .expect("JSON values always serialize")
    }
}

enum Inbound {
    Connect { id: ConnId, outbox: mpsc::Sender<Outgoing> },
    Frame { id: ConnId, text: String },
    Disconnect { id: ConnId },
    Tick,
}

fn to_payload<T: Serialize>(value: &T) -> Arc<Value> {
    Arc::new(serde_json::to_value(value).expect("payload types serialize"))
}

struct Owner {
    session: Session,
    pipeline: Pipeline,
    sink: Box<dyn LogSink>,
    clients: BTreeMap<ConnId, mpsc::Sender<Outgoing>>,
    started: Instant,
}

impl Owner {
    fn send(&mut self, id: ConnId, kind: MessageKind, payload: Arc<Value>, reply_to: Option<String>) {
        let Some(outbox) = self.clients.get(&id) else {
            return;
        };
        if let Err(e) = outbox.try_send(Outgoing { kind, payload, reply_to }) {
            // Dropping the sender ends the writer, which closes the socket.
            warn!(conn = id, "dropping client: {e}");
            self.clients.remove(&id);
        }
    }

    /// Sends to everyone; `origin` gets the `reply_to` tag.
    fn broadcast(&mut self, kind: MessageKind, payload: Arc<Value>, origin: Option<(ConnId, Option<String>)>) {
        let ids: Vec<ConnId> = self.clients.keys().copied().collect();
        for id in ids {
            let reply_to = match &origin {
                Some((o, r)) if *o == id => r.clone(),
                _ => None,
            };
            self.send(id, kind, payload.clone(), reply_to);
        }
    }

    fn snapshot_payload(&self) -> Arc<Value> {
        to_payload(&SnapshotPayload {
            session: self.session.snapshot().clone(),
            scene: self.pipeline.scene_info(),
        })
    }

    fn error(&mut self, id: ConnId, message: String, reply_to: Option<String>) {
        self.send(id, MessageKind::Error, to_payload(&ErrorPayload { message }), reply_to);
    }

    /// Write-ahead: the entry is durable before the session or any client
    /// sees it.
    fn commit(&mut self, entry: LogEntry) -> Result<(), String> {
        self.sink
            .append(&entry)
            .map_err(|e| format!("session log append failed: {e}"))?;
        self.session.apply(entry).map_err(|e| e.to_string())
    }

    fn handle(&mut self, msg: Inbound) {
        match msg {
            Inbound::Connect { id, outbox } => {
                debug!(conn = id, "connected");
                self.clients.insert(id, outbox);
                let snapshot = self.snapshot_payload();
                self.send(id, MessageKind::StateSnapshot, snapshot, None);
            }
            Inbound::Disconnect { id } => {
                debug!(conn = id, "disconnected");
                self.clients.remove(&id);
            }
            Inbound::Frame { id, text } => match parse_client_message(&text) {
                Err(e) => self.error(id, e.message, e.reply_to),
                Ok(ClientMessage::Command { id: rid, command }) => self.on_command(id, rid, command),
                Ok(ClientMessage::Annotation { id: rid, annotation }) => self.on_annotation(id, rid, annotation),
            },
            Inbound::Tick => {
                let t = self.started.elapsed().as_secs_f64();
                for sample in self.pipeline.tracking(&self.session, t) {
                    self.broadcast(MessageKind::TrackingSample, to_payload(&sample), None);
                }
            }
        }
    }

    fn on_command(&mut self, id: ConnId, reply_to: Option<String>, command: Command) {
        let entry = match self.pipeline.prepare(&self.session, command, unix_now()) {
            Ok(entry) => entry,
            Err(rejection) => {
                self.send(id, MessageKind::CommandRejected, to_payload(&rejection), reply_to);
                return;
            }
        };
        let before = self.session.annotations().len();
        if let Err(message) = self.commit(entry) {
            warn!("{message}");
            self.error(id, message, reply_to);
            return;
        }
        let created: Vec<Annotation> = self.session.annotations()[before..].to_vec();
        for a in &created {
            self.broadcast(MessageKind::AnnotationEvent, to_payload(a), None);
        }
        let snapshot = self.snapshot_payload();
        self.broadcast(MessageKind::StateSnapshot, snapshot, Some((id, reply_to)));
    }

    fn on_annotation(&mut self, id: ConnId, reply_to: Option<String>, mut annotation: Annotation) {
        annotation.author = Author::Remote;
        match self.session.plan_remote_annotation(annotation.clone(), unix_now()) {
            Err(rejection) => self.send(id, MessageKind::CommandRejected, to_payload(&rejection), reply_to),
            Ok(RemoteOutcome::Duplicate) => {
                self.send(id, MessageKind::AnnotationEvent, to_payload(&annotation), reply_to);
            }
            Ok(RemoteOutcome::Accepted(entry)) => {
                if let Err(message) = self.commit(entry) {
                    warn!("{message}");
                    self.error(id, message, reply_to);
                    return;
                }
                self.broadcast(MessageKind::AnnotationEvent, to_payload(&annotation), Some((id, reply_to)));
                let snapshot = self.snapshot_payload();
                self.broadcast(MessageKind::StateSnapshot, snapshot, None);
            }
        }
    }
}

/// A running service. Dropping the handle does not stop it; call
/// [`ServerHandle::shutdown`].
pub struct ServerHandle {
    tcp_addr: SocketAddr,
    ws_addr: SocketAddr,
    stop: watch::Sender<bool>,
    owner: JoinHandle<Session>,
    tasks: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    /// Newline-delimited JSON endpoint.
    pub fn tcp_addr(&self) -> SocketAddr {
        self.tcp_addr
    }

    /// WebSocket endpoint carrying the same frames.
    pub fn ws_addr(&self) -> SocketAddr {
        self.ws_addr
    }

    /// Stops accepting, closes connections, and returns the final session.
    pub async fn shutdown(self) -> Session {
        let _ = self.stop.send(true);
        for t in self.tasks {
            t.abort();
        }
        self.owner.await.expect("session owner task panicked")
    }
}

/// Binds both listeners and starts serving `session`. Events are appended
/// to `sink` before they are applied or broadcast.
pub async fn start(
    config: &ServiceConfig,
    session: Session,
    scene: Scene,
    sink: Box<dyn LogSink>,
) -> io::Result<ServerHandle> {
    let tcp = TcpListener::bind((config.host, config.port)).await?;
    let ws = TcpListener::bind((config.host, config.ws_port)).await?;
    let tcp_addr = tcp.local_addr()?;
    let ws_addr = ws.local_addr()?;
    info!(%tcp_addr, %ws_addr, state = %session.state(), "serving");

    let (inbox_tx, mut inbox) = mpsc::channel(INBOX_CAPACITY);
    let (stop, stopped) = watch::channel(false);
    let next_id = Arc::new(AtomicU64::new(1));

    let mut owner = Owner {
        session,
        pipeline: Pipeline::new(scene, config.seed),
        sink,
        clients: BTreeMap::new(),
        started: Instant::now(),
    };
    let mut owner_stop = stopped.clone();
    let owner = tokio::spawn(async move {
        loop {
            tokio::select! {
                msg = inbox.recv() => match msg {
                    Some(m) => owner.handle(m),
                    None => break,
                },
                _ = owner_stop.changed() => break,
            }
        }
        owner.session
    });

    let mut tasks = vec![
        tokio::spawn(accept_loop(tcp, inbox_tx.clone(), next_id.clone(), stopped.clone(), Framing::Lines)),
        tokio::spawn(accept_loop(ws, inbox_tx.clone(), next_id, stopped.clone(), Framing::WebSocket)),
    ];
    if config.tick_hz > 0.0 {
        let period = Duration::from_secs_f64(1.0 / config.tick_hz);
        tasks.push(tokio::spawn(tick_loop(period, inbox_tx)));
    }
    Ok(ServerHandle {
        tcp_addr,
        ws_addr,
        stop,
        owner,
        tasks,
    })
}

async fn tick_loop(period: Duration, inbox: mpsc::Sender<Inbound>) {
    let mut interval = tokio::time::interval(period);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    loop {
        interval.tick().await;
        match inbox.try_send(Inbound::Tick) {
            Ok(()) | Err(mpsc::error::TrySendError::Full(_)) => {}
            Err(mpsc::error::TrySendError::Closed(_)) => return,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Framing {
    Lines,
    WebSocket,
}

async fn accept_loop(
    listener: TcpListener,
    inbox: mpsc::Sender<Inbound>,
    next_id: Arc<AtomicU64>,
    stopped: watch::Receiver<bool>,
    framing: Framing,
) {
    loop {
        let (stream, peer) = match listener.accept().await {
            Ok(x) => x,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let id = next_id.fetch_add(1, Ordering::Relaxed);
        debug!(conn = id, %peer, ?framing, "accepted");
        let inbox = inbox.clone();
        let stopped = stopped.clone();
        tokio::spawn(async move {
            let result = match framing {
                Framing::Lines => serve_lines(stream, id, inbox, stopped).await,
                Framing::WebSocket => serve_websocket(stream, id, inbox, stopped).await,
            };
            if let Err(e) = result {
                debug!(conn = id, "connection ended: {e}");
            }
        });
    }
}

/// Reads one `\n`-terminated frame. `Ok(None)` at end of stream.
async fn read_frame<R: AsyncRead + Unpin>(reader: &mut BufReader<R>, buf: &mut Vec<u8>) -> io::Result<Option<()>> {
    buf.clear();
    let n = reader.take(MAX_FRAME_BYTES as u64 + 1).read_until(b'\n', buf).await?;
    if n == 0 {
        return Ok(None);
    }
    if buf.last() != Some(&b'\n') && buf.len() > MAX_FRAME_BYTES {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too long"));
    }
    Ok(Some(()))
}

async fn serve_lines(
    stream: TcpStream,
    id: ConnId,
    inbox: mpsc::Sender<Inbound>,
    mut stopped: watch::Receiver<bool>,
) -> io::Result<()> {
    let (rd, mut wr) = stream.into_split();
    let (outbox, mut out_rx) = mpsc::channel::<Outgoing>(OUTBOX_CAPACITY);
    if inbox.send(Inbound::Connect { id, outbox }).await.is_err() {
        return Ok(());
    }
    let writer = tokio::spawn(async move {
        let mut seq = 0;
        while let Some(out) = out_rx.recv().await {
            seq += 1;
            let mut line = out.encode(seq);
            line.push('\n');
            if wr.write_all(line.as_bytes()).await.is_err() {
                break;
            }
        }
        let _ = wr.shutdown().await;
    });

    let mut reader = BufReader::new(rd);
    let mut buf = Vec::new();
    let result = loop {
        let frame = tokio::select! {
            r = read_frame(&mut reader, &mut buf) => r,
            _ = stopped.changed() => break Ok(()),
        };
        match frame {
            Ok(Some(())) => {}
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        }
        let text = String::from_utf8_lossy(&buf);
        let text = text.trim_end_matches(['\n', '\r']);
        if text.trim().is_empty() {
            continue;
        }
        if inbox.send(Inbound::Frame { id, text: text.to_string() }).await.is_err() {
            break Ok(());
        }
    };
    if *stopped.borrow() {
        writer.abort();
    } else {
        let _ = inbox.send(Inbound::Disconnect { id }).await;
        let _ = writer.await;
    }
    result
}

async fn serve_websocket(
    stream: TcpStream,
    id: ConnId,
    inbox: mpsc::Sender<Inbound>,
    mut stopped: watch::Receiver<bool>,
) -> io::Result<()> {
    let ws = tokio_tungstenite::accept_async(stream)
        .await
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let (mut sink, mut source) = ws.split();
    let (outbox, mut out_rx) = mpsc::channel::<Outgoing>(OUTBOX_CAPACITY);
    if inbox.send(Inbound::Connect { id, outbox }).await.is_err() {
        return Ok(());
    }
    let writer = tokio::spawn(async move {
        let mut seq = 0;
        while let Some(out) = out_rx.recv().await {
            seq += 1;
            if sink.send(Message::text(out.encode(seq))).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    let result = loop {
        let msg = tokio::select! {
            m = source.next() => m,
            _ = stopped.changed() => break Ok(()),
        };
        let text = match msg {
            None => break Ok(()),
            Some(Err(e)) => break Err(io::Error::other(e)),
            Some(Ok(Message::Text(t))) => t.to_string(),
            // Binary payloads are offered to the parser so they get the
            // usual error reply rather than a silent drop.
            Some(Ok(Message::Binary(b))) => String::from_utf8_lossy(&b).into_owned(),
            Some(Ok(Message::Close(_))) => break Ok(()),
            Some(Ok(_)) => continue,
        };
        if text.len() > MAX_FRAME_BYTES {
            break Err(io::Error::new(io::ErrorKind::InvalidData, "frame too long"));
        }
        if inbox.send(Inbound::Frame { id, text }).await.is_err() {
            break Ok(());
        }
    };
    if *stopped.borrow() {
        writer.abort();
    } else {
        let _ = inbox.send(Inbound::Disconnect { id }).await;
        let _ = writer.await;
    }
    result
}
