#![allow(dead_code)]

use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use holonav::config::ServiceConfig;
use holonav::persist::{LogSink, NoLog};
use holonav::protocol::{MessageKind, ServerMessage, SnapshotPayload};
use holonav::server::{self, ServerHandle};
use holonav_core::scene::Scene;
use holonav_core::session::{LogEntry, Session, SessionState};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

pub const RECV_TIMEOUT: Duration = Duration::from_secs(10);

pub async fn start(tick_hz: f64, session: Session, sink: Box<dyn LogSink>) -> ServerHandle {
    let cfg = ServiceConfig {
        port: 0,
        ws_port: 0,
        tick_hz,
        seed: 7,
        ..ServiceConfig::default()
    };
    server::start(&cfg, session, Scene::default(), sink).await.expect("server starts")
}

pub async fn start_quiet() -> ServerHandle {
    start(0.0, Session::new(), Box::new(NoLog)).await
}

/// Records every append; `fail_next` makes the next append fail once.
#[derive(Clone, Default)]
pub struct RecordingSink {
    pub entries: Arc<Mutex<Vec<LogEntry>>>,
    pub fail_next: Arc<AtomicBool>,
}

impl LogSink for RecordingSink {
    fn append(&mut self, entry: &LogEntry) -> io::Result<()> {
        if self.fail_next.swap(false, Ordering::SeqCst) {
            return Err(io::Error::other("disk full (injected)"));
        }
        self.entries.lock().unwrap().push(entry.clone());
        Ok(())
    }
}

enum Transport {
    Lines {
        reader: BufReader<OwnedReadHalf>,
        writer: OwnedWriteHalf,
    },
    Ws(Box<WebSocketStream<MaybeTlsStream<TcpStream>>>),
}

/// Headless client for either framing. Checks that server `seq` values
/// arrive as 1, 2, 3, ... on every read.
pub struct Client {
    transport: Transport,
    pub last_seq: u64,
    pub received: Vec<ServerMessage>,
}

impl Client {
    pub async fn lines(addr: SocketAddr) -> Client {
        let (rd, wr) = TcpStream::connect(addr).await.expect("connect").into_split();
        Client {
            transport: Transport::Lines {
                reader: BufReader::new(rd),
                writer: wr,
            },
            last_seq: 0,
            received: Vec::new(),
        }
    }

    pub async fn websocket(addr: SocketAddr) -> Client {
        let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}")).await.expect("ws connect");
        Client {
            transport: Transport::Ws(Box::new(ws)),
            last_seq: 0,
            received: Vec::new(),
        }
    }

    pub async fn send_raw(&mut self, text: &str) {
        match &mut self.transport {
            Transport::Lines { writer, .. } => {
                writer.write_all(text.as_bytes()).await.unwrap();
                writer.write_all(b"\n").await.unwrap();
            }
            Transport::Ws(ws) => ws.send(Message::text(text)).await.unwrap(),
        }
    }

    pub async fn send_bytes(&mut self, bytes: &[u8]) {
        match &mut self.transport {
            Transport::Lines { writer, .. } => writer.write_all(bytes).await.unwrap(),
            Transport::Ws(ws) => ws.send(Message::binary(bytes.to_vec())).await.unwrap(),
        }
    }

    async fn next_text(&mut self) -> Option<String> {
        match &mut self.transport {
            Transport::Lines { reader, .. } => {
                let mut line = String::new();
                match reader.read_line(&mut line).await.unwrap() {
                    0 => None,
                    _ => Some(line),
                }
            }
            Transport::Ws(ws) => loop {
                match ws.next().await? {
                    Ok(Message::Text(t)) => return Some(t.to_string()),
                    Ok(Message::Close(_)) | Err(_) => return None,
                    Ok(_) => continue,
                }
            },
        }
    }

    pub async fn recv(&mut self) -> ServerMessage {
        let text = tokio::time::timeout(RECV_TIMEOUT, self.next_text())
            .await
            .expect("timed out waiting for a server frame")
            .expect("server closed the connection");
        let msg: ServerMessage = serde_json::from_str(&text).expect("server frames are valid JSON");
        assert_eq!(msg.v, 1);
        assert_eq!(msg.seq, self.last_seq + 1, "per-connection seq must increase by one");
        self.last_seq = msg.seq;
        self.received.push(msg.clone());
        msg
    }

    /// Next frame that is not a tracking sample.
    pub async fn recv_event(&mut self) -> ServerMessage {
        loop {
            let m = self.recv().await;
            if m.kind != MessageKind::TrackingSample {
                return m;
            }
        }
    }

    pub async fn recv_reply(&mut self, id: &str) -> ServerMessage {
        loop {
            let m = self.recv().await;
            if m.reply_to.as_deref() == Some(id) {
                return m;
            }
        }
    }

    /// True when the server closes the connection within the timeout.
    pub async fn closed(&mut self) -> bool {
        matches!(tokio::time::timeout(RECV_TIMEOUT, self.next_text()).await, Ok(None))
    }
}

pub fn snapshot(msg: &ServerMessage) -> SnapshotPayload {
    assert_eq!(msg.kind, MessageKind::StateSnapshot, "{msg:?}");
    serde_json::from_value(msg.payload.clone()).expect("snapshot payload")
}

pub fn state_of(msg: &ServerMessage) -> SessionState {
    snapshot(msg).session.state
}
