//! Fan-out gateway. One serializer task owns the probe source, the sequence
//! counter and the session log; each client gets an unbounded queue so a
//! slow reader never drops or reorders messages.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use rubble_core::protocol::{decode, encode, Envelope, LogLevel, Message, ProtocolError, Session, SessionLog};
use rubble_core::sim::SimError;
use rubble_core::telemetry::{survivability, SerialDecoder, SerialEvent};
use tokio::io::{AsyncBufRead, AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc::{self, UnboundedReceiver, UnboundedSender};
use tokio::task::JoinHandle;
use tokio::time::{Instant, Interval, MissedTickBehavior};
use tokio_tungstenite::tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tokio_tungstenite::tungstenite::{self, http};

pub const STREAM_PATH: &str = "/stream";

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Log(#[from] ProtocolError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Where probe messages come from.
pub enum Source {
    Sim(Session),
    /// Serial-monitor text, one line at a time.
    Serial(Box<dyn AsyncBufRead + Send + Unpin>),
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    /// Wall-clock period of one simulator cycle.
    pub tick: Duration,
    /// Stop after this many cycles.
    pub max_ticks: Option<u64>,
    /// Hold the first cycle until this many clients are connected.
    pub wait_for_clients: usize,
    pub log_path: Option<PathBuf>,
    /// How long to wait for an HTTP request line before treating a
    /// connection as raw NDJSON.
    pub sniff_timeout: Duration,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            tick: Duration::from_secs(2),
            max_ticks: None,
            wait_for_clients: 0,
            log_path: None,
            sniff_timeout: Duration::from_millis(250),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ServeSummary {
    pub messages: u64,
    pub ticks: u64,
    pub clients: u64,
}

pub async fn bind(addr: &str) -> Result<TcpListener, ServeError> {
    TcpListener::bind(addr).await.map_err(|source| ServeError::Bind { addr: addr.to_string(), source })
}

type Line = Arc<str>;

enum Event {
    Join(u64, UnboundedSender<Line>),
    Leave(u64),
    Inbound(u64, String),
    SourceLine(String),
    SourceClosed(Option<String>),
}

/// Runs until the source ends (tick limit reached or serial EOF), then
/// flushes every client queue and closes the connections.
pub async fn serve(listener: TcpListener, source: Source, cfg: ServeConfig) -> Result<ServeSummary, ServeError> {
    let log = cfg.log_path.as_ref().map(SessionLog::create).transpose()?;
    let (events_tx, events_rx) = mpsc::unbounded_channel();
    let (conn_tx, mut conn_rx) = mpsc::unbounded_channel::<JoinHandle<()>>();

    let accept = {
        let events_tx = events_tx.clone();
        let sniff = cfg.sniff_timeout;
        tokio::spawn(async move {
            let mut next_id = 0u64;
            while let Ok((stream, _)) = listener.accept().await {
                let _ = stream.set_nodelay(true);
                let id = next_id;
                next_id += 1;
                let _ = conn_tx.send(tokio::spawn(connection(stream, id, events_tx.clone(), sniff)));
            }
        })
    };

    let (probe, reader) = match source {
        Source::Sim(session) => (Probe::Sim(session), None),
        Source::Serial(input) => {
            let tx = events_tx.clone();
            let reader = tokio::spawn(async move {
                let mut lines = input.lines();
                let reason = loop {
                    match lines.next_line().await {
                        Ok(Some(l)) => {
                            let _ = tx.send(Event::SourceLine(l));
                        }
                        Ok(None) => break None,
                        Err(e) => break Some(e.to_string()),
                    }
                };
                let _ = tx.send(Event::SourceClosed(reason));
            });
            (Probe::Serial { decoder: SerialDecoder::new(), seq: 0, start: Instant::now() }, Some(reader))
        }
    };
    drop(events_tx);

    let result = Serializer { probe, log, clients: Vec::new(), summary: ServeSummary::default() }
        .run(events_rx, &cfg)
        .await;

    accept.abort();
    if let Some(r) = reader {
        r.abort();
    }
    while let Ok(handle) = conn_rx.try_recv() {
        let abort = handle.abort_handle();
        if tokio::time::timeout(Duration::from_secs(5), handle).await.is_err() {
            abort.abort();
        }
    }
    result
}

enum Probe {
    Sim(Session),
    Serial { decoder: SerialDecoder, seq: u64, start: Instant },
}

impl Probe {
    fn stamp(&mut self, message: Message) -> Envelope {
        match self {
            Probe::Sim(s) => s.emit(message),
            Probe::Serial { seq, start, .. } => {
                let e = Envelope::new(*seq, start.elapsed().as_millis() as u64, message);
                *seq += 1;
                e
            }
        }
    }
}

struct Serializer {
    probe: Probe,
    log: Option<SessionLog>,
    clients: Vec<(u64, UnboundedSender<Line>)>,
    summary: ServeSummary,
}

impl Serializer {
    async fn run(mut self, mut events: UnboundedReceiver<Event>, cfg: &ServeConfig) -> Result<ServeSummary, ServeError> {
        let ticking = matches!(self.probe, Probe::Sim(_));
        let mut interval: Option<Interval> = None;
        loop {
            if ticking && interval.is_none() && self.clients.len() >= cfg.wait_for_clients {
                let mut iv = tokio::time::interval_at(Instant::now() + cfg.tick, cfg.tick);
                iv.set_missed_tick_behavior(MissedTickBehavior::Delay);
                interval = Some(iv);
            }
            if cfg.max_ticks.is_some_and(|m| self.summary.ticks >= m) {
                break;
            }
            tokio::select! {
                ev = events.recv() => match ev {
                    Some(ev) => {
                        if !self.handle(ev)? {
                            break;
                        }
                    }
                    None => break,
                },
                _ = next_tick(&mut interval) => self.tick()?,
            }
        }
        // Dropping the queues lets every writer drain and close.
        self.clients.clear();
        Ok(self.summary)
    }

    fn publish(&mut self, env: &Envelope) -> Result<(), ServeError> {
        if let Some(log) = &mut self.log {
            log.append(env)?;
        }
        let line: Line = encode(env).into();
        self.clients.retain(|(_, tx)| tx.send(line.clone()).is_ok());
        self.summary.messages += 1;
        Ok(())
    }

    fn reply(&mut self, client: u64, env: &Envelope) -> Result<(), ServeError> {
        if let Some(log) = &mut self.log {
            log.append(env)?;
        }
        if let Some((_, tx)) = self.clients.iter().find(|(id, _)| *id == client) {
            let _ = tx.send(encode(env).into());
        }
        self.summary.messages += 1;
        Ok(())
    }

    fn tick(&mut self) -> Result<(), ServeError> {
        let Probe::Sim(session) = &mut self.probe else { return Ok(()) };
        let (_, msgs) = session.tick()?;
        self.summary.ticks += 1;
        for m in &msgs {
            self.publish(m)?;
        }
        Ok(())
    }

    /// Returns `false` when the session is over.
    fn handle(&mut self, ev: Event) -> Result<bool, ServeError> {
        match ev {
            Event::Join(id, tx) => {
                self.clients.push((id, tx));
                self.summary.clients += 1;
            }
            Event::Leave(id) => self.clients.retain(|(c, _)| *c != id),
            Event::Inbound(id, line) => self.inbound(id, &line)?,
            Event::SourceLine(line) => {
                let Probe::Serial { decoder, .. } = &mut self.probe else { return Ok(true) };
                let evs = decoder.push_line(&line);
                self.serial_events(evs)?;
            }
            Event::SourceClosed(reason) => {
                if let Probe::Serial { decoder, .. } = &mut self.probe {
                    let evs = decoder.finish();
                    self.serial_events(evs)?;
                }
                let text = reason.map_or_else(|| "probe source closed".to_string(), |r| format!("probe source failed: {r}"));
                let env = self.probe.stamp(Message::Error { code: "source_disconnected".into(), text });
                self.publish(&env)?;
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn inbound(&mut self, client: u64, line: &str) -> Result<(), ServeError> {
        if line.trim().is_empty() {
            return Ok(());
        }
        let reject = |code: &str, text: String| Message::Error { code: code.into(), text };
        let msg = match decode(line) {
            Ok(Envelope { message: Message::Drive(cmd), .. }) if cmd.is_valid() => {
                let env = match &mut self.probe {
                    Probe::Sim(s) => s.drive(cmd),
                    p @ Probe::Serial { .. } => p.stamp(Message::Drive(cmd)),
                };
                return self.publish(&env);
            }
            Ok(Envelope { message: Message::Drive(cmd), .. }) => {
                reject("bad_request", format!("drive magnitude {} outside [0, 1]", cmd.magnitude))
            }
            Ok(env) => reject("unsupported", format!("clients may only send drive messages, got {}", env.message.kind())),
            Err(e) => reject("bad_request", e.to_string()),
        };
        let env = self.probe.stamp(msg);
        self.reply(client, &env)
    }

    fn serial_events(&mut self, evs: Vec<SerialEvent>) -> Result<(), ServeError> {
        for ev in evs {
            match ev {
                SerialEvent::Sensor(mut frame) => {
                    let env = self.probe.stamp(Message::Telemetry(frame));
                    frame.timestamp_ms = env.t_ms;
                    let env = Envelope { message: Message::Telemetry(frame), ..env };
                    self.publish(&env)?;
                    let s = self.probe.stamp(Message::Survivability(survivability(&frame)));
                    self.publish(&s)?;
                }
                SerialEvent::Prediction(p) => {
                    let env = self.probe.stamp(Message::Prediction(p));
                    self.publish(&env)?;
                }
                SerialEvent::Line(text) => {
                    let env = self.probe.stamp(Message::Log { level: LogLevel::Info, text });
                    self.publish(&env)?;
                }
                SerialEvent::Error(e) => {
                    let env = self.probe.stamp(Message::Error { code: "serial_parse".into(), text: e.to_string() });
                    self.publish(&env)?;
                }
            }
        }
        Ok(())
    }
}

async fn next_tick(interval: &mut Option<Interval>) {
    match interval {
        Some(iv) => {
            iv.tick().await;
        }
        None => std::future::pending().await,
    }
}

/// Peeks at the first bytes: an HTTP `GET` becomes a WebSocket on
/// [`STREAM_PATH`], anything else (or silence) is raw NDJSON.
async fn connection(stream: TcpStream, id: u64, events: UnboundedSender<Event>, sniff: Duration) {
    let mut buf = [0u8; 4];
    let deadline = Instant::now() + sniff;
    let is_http = loop {
        match tokio::time::timeout_at(deadline, stream.peek(&mut buf)).await {
            Ok(Ok(n)) if n >= 4 => break &buf == b"GET ",
            Ok(Ok(0)) | Ok(Err(_)) => return,
            Ok(Ok(n)) if !b"GET ".starts_with(&buf[..n]) => break false,
            Ok(Ok(_)) => tokio::time::sleep(Duration::from_millis(5)).await,
            Err(_) => break false,
        }
    };
    if is_http {
        websocket(stream, id, events).await
    } else {
        raw(stream, id, events).await
    }
}

async fn raw(stream: TcpStream, id: u64, events: UnboundedSender<Event>) {
    let (read, mut write) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Line>();
    if events.send(Event::Join(id, tx)).is_err() {
        return;
    }
    let reader = {
        let events = events.clone();
        tokio::spawn(async move {
            let mut lines = BufReader::new(read).lines();
            while let Ok(Some(l)) = lines.next_line().await {
                if events.send(Event::Inbound(id, l)).is_err() {
                    break;
                }
            }
            let _ = events.send(Event::Leave(id));
        })
    };
    while let Some(line) = rx.recv().await {
        let mut bytes = Vec::with_capacity(line.len() + 1);
        bytes.extend_from_slice(line.as_bytes());
        bytes.push(b'\n');
        if write.write_all(&bytes).await.is_err() {
            break;
        }
    }
    let _ = write.shutdown().await;
    reader.abort();
}

#[allow(clippy::result_large_err)]
fn only_stream_path(req: &Request, resp: Response) -> Result<Response, ErrorResponse> {
    if req.uri().path() == STREAM_PATH {
        Ok(resp)
    } else {
        let mut r = ErrorResponse::new(Some(format!("only {STREAM_PATH} is served")));
        *r.status_mut() = http::StatusCode::NOT_FOUND;
        Err(r)
    }
}

async fn websocket(stream: TcpStream, id: u64, events: UnboundedSender<Event>) {
    let Ok(ws) = tokio_tungstenite::accept_hdr_async(stream, only_stream_path).await else { return };
    let (mut sink, mut incoming) = ws.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Line>();
    if events.send(Event::Join(id, tx)).is_err() {
        return;
    }
    let reader = {
        let events = events.clone();
        tokio::spawn(async move {
            while let Some(Ok(msg)) = incoming.next().await {
                match msg {
                    tungstenite::Message::Text(t) => {
                        for l in t.as_str().lines() {
                            let _ = events.send(Event::Inbound(id, l.to_string()));
                        }
                    }
                    tungstenite::Message::Close(_) => break,
                    _ => {}
                }
            }
            let _ = events.send(Event::Leave(id));
        })
    };
    while let Some(line) = rx.recv().await {
        if sink.send(tungstenite::Message::text(line.to_string())).await.is_err() {
            break;
        }
    }
    let _ = sink.close().await;
    reader.abort();
}
