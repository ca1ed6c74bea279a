//! NDJSON wire protocol between the gateway and its clients, plus the
//! session runner that turns simulator cycles into messages.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::sim::{DriveCommand, Pose, SimError, Simulator, TickOutput, TimedCommand};
use crate::telemetry::{survivability, PredictionBlock, SensorFrame, SurvivabilityReport};

/// Longest accepted line, newline excluded.
pub const MAX_LINE_BYTES: usize = 64 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("line of {len} bytes exceeds the {MAX_LINE_BYTES} byte limit")]
    Oversize { len: usize },
    #[error("malformed JSON: {0}")]
    Malformed(String),
    #[error("message has no string \"type\" field")]
    MissingType,
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("invalid {kind} message: {message}")]
    Invalid { kind: String, message: String },
    #[error("session log {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("session log line {line}: {source}")]
    Log { line: usize, source: Box<ProtocolError> },
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogLevel {
    Debug,
    Info,
    Warn,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Telemetry(SensorFrame),
    Prediction(PredictionBlock),
    Survivability(SurvivabilityReport),
    Drive(DriveCommand),
    Pose(Pose),
    Log { level: LogLevel, text: String },
    Error { code: String, text: String },
}

pub const MESSAGE_TYPES: [&str; 7] = ["telemetry", "prediction", "survivability", "drive", "pose", "log", "error"];

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Telemetry(_) => "telemetry",
            Message::Prediction(_) => "prediction",
            Message::Survivability(_) => "survivability",
            Message::Drive(_) => "drive",
            Message::Pose(_) => "pose",
            Message::Log { .. } => "log",
            Message::Error { .. } => "error",
        }
    }
}

/// A message with its place in the session. Clients may omit `seq` and
/// `t_ms` on messages they send; the gateway assigns both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(default)]
    pub seq: u64,
    #[serde(default)]
    pub t_ms: u64,
    #[serde(flatten)]
    pub message: Message,
}

impl Envelope {
    pub fn new(seq: u64, t_ms: u64, message: Message) -> Self {
        Self { seq, t_ms, message }
    }
}

/// One JSON object, no trailing newline.
pub fn encode(env: &Envelope) -> String {
    serde_json::to_string(env).expect("envelopes always serialize")
}

/// Encoded line with its terminating newline.
pub fn encode_line(env: &Envelope) -> String {
    let mut s = encode(env);
    s.push('\n');
    s
}

pub fn decode(line: &str) -> Result<Envelope> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    if line.len() > MAX_LINE_BYTES {
        return Err(ProtocolError::Oversize { len: line.len() });
    }
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let kind = value.get("type").and_then(|t| t.as_str()).ok_or(ProtocolError::MissingType)?.to_string();
    if !MESSAGE_TYPES.contains(&kind.as_str()) {
        return Err(ProtocolError::UnknownType(kind));
    }
    // Re-parse from text so floats keep their exact decimal round trip.
    serde_json::from_str(line).map_err(|e| ProtocolError::Invalid { kind, message: e.to_string() })
}

/// Append-only NDJSON record of everything a session emitted.
pub struct SessionLog {
    path: String,
    out: BufWriter<File>,
}

impl SessionLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let file = File::create(p).map_err(|source| ProtocolError::Io { path: p.display().to_string(), source })?;
        Ok(Self { path: p.display().to_string(), out: BufWriter::new(file) })
    }

    pub fn append(&mut self, env: &Envelope) -> Result<()> {
        self.out
            .write_all(encode_line(env).as_bytes())
            .and_then(|_| self.out.flush())
            .map_err(|source| ProtocolError::Io { path: self.path.clone(), source })
    }
}

pub fn read_session_log(path: impl AsRef<Path>) -> Result<Vec<Envelope>> {
    let p = path.as_ref();
    let io = |source| ProtocolError::Io { path: p.display().to_string(), source };
    let reader = BufReader::new(File::open(p).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(decode(&line).map_err(|e| ProtocolError::Log { line: i + 1, source: Box::new(e) })?);
    }
    Ok(out)
}

/// Drive commands recorded in a session, in order.
pub fn recorded_commands(log: &[Envelope]) -> Vec<TimedCommand> {
    log.iter()
        .filter_map(|e| match &e.message {
            Message::Drive(c) => Some(TimedCommand { t_ms: e.t_ms, command: *c }),
            _ => None,
        })
        .collect()
}

/// Numbers simulator output as a message stream. A drive command issued
/// after cycle `k - 1` is stamped one millisecond later and governs the
/// motion of cycle `k`.
pub struct Session {
    sim: Simulator,
    seq: u64,
    last_t_ms: u64,
}

impl Session {
    pub fn new(sim: Simulator) -> Self {
        Self { sim, seq: 0, last_t_ms: 0 }
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    fn envelope(&mut self, t_ms: u64, message: Message) -> Envelope {
        let e = Envelope::new(self.seq, t_ms, message);
        self.seq += 1;
        e
    }

    /// Stamps an out-of-band message (log, error) into the sequence.
    pub fn emit(&mut self, message: Message) -> Envelope {
        let t = self.last_t_ms + 1;
        self.envelope(t, message)
    }

    /// Latches a live command and returns its echo for the stream.
    pub fn drive(&mut self, cmd: DriveCommand) -> Envelope {
        let t = self.last_t_ms + 1;
        self.drive_at(TimedCommand { t_ms: t, command: cmd })
    }

    pub fn drive_at(&mut self, c: TimedCommand) -> Envelope {
        self.sim.command(c.command);
        self.envelope(c.t_ms, Message::Drive(c.command))
    }

    /// Pose, telemetry, survivability and, when a model is loaded, the prediction.
    pub fn tick(&mut self) -> std::result::Result<(TickOutput, Vec<Envelope>), SimError> {
        let out = self.sim.tick()?;
        self.last_t_ms = out.t_ms;
        let t = out.t_ms;
        let mut msgs = vec![
            self.envelope(t, Message::Pose(out.pose)),
            self.envelope(t, Message::Telemetry(out.frame)),
            self.envelope(t, Message::Survivability(survivability(&out.frame))),
        ];
        if let Some(p) = out.prediction {
            msgs.push(self.envelope(t, Message::Prediction(p)));
        }
        Ok((out, msgs))
    }
}

/// Runs `cycles` cycles offline. A command with `t_ms` strictly before a
/// cycle's time stamp is in effect for that cycle.
pub fn replay(sim: Simulator, commands: &[TimedCommand], cycles: u64) -> std::result::Result<Vec<Envelope>, SimError> {
    let mut commands: Vec<TimedCommand> = commands.to_vec();
    commands.sort_by_key(|c| c.t_ms);
    let mut session = Session::new(sim);
    let mut out = Vec::new();
    let mut next = 0;
    for _ in 0..cycles {
        let due = session.sim.next_tick_ms();
        while next < commands.len() && commands[next].t_ms < due {
            out.push(session.drive_at(commands[next]));
            next += 1;
        }
        out.extend(session.tick()?.1);
    }
    Ok(out)
}

/// One canonical instance of every message type, keyed by fixture name.
pub fn sample_messages() -> Vec<(&'static str, Envelope)> {
    use crate::sim::Direction;
    use crate::telemetry::Level;
    let frame = SensorFrame { gas_raw: 168, temp_c: 32.67, humidity_pct: 52.81, pressure_kpa: 0.0, timestamp_ms: 4000 };
    vec![
        ("telemetry", Envelope::new(1, 4000, Message::Telemetry(frame))),
        (
            "prediction",
            Envelope::new(
                3,
                4000,
                Message::Prediction(PredictionBlock {
                    dsp_ms: 132,
                    classification_ms: 2,
                    anomaly_ms: 0,
                    probabilities: [0.02, 0.01, 0.93, 0.03, 0.01],
                }),
            ),
        ),
        (
            "survivability",
            Envelope::new(
                2,
                4000,
                Message::Survivability(SurvivabilityReport {
                    air: Level::Good,
                    thermal: Level::Moderate,
                    overall: Level::Moderate,
                    rationale: vec![
                        "air Good: gas 168 (good <= 400, moderate <= 700)".into(),
                        "thermal Moderate: 37.10 C vs good band 15-35 C, 52.81% vs good band 20-80%".into(),
                    ],
                }),
            ),
        ),
        ("drive", Envelope::new(4, 4001, Message::Drive(DriveCommand::new(Direction::Forward, 0.5)))),
        ("pose", Envelope::new(0, 4000, Message::Pose(Pose { x: 2.5, y: 1.25, heading: 1.5707963267948966 }))),
        ("log", Envelope::new(5, 4001, Message::Log { level: LogLevel::Info, text: "client connected".into() })),
        (
            "error",
            Envelope::new(6, 4001, Message::Error { code: "bad_request".into(), text: "unknown message type \"jump\"".into() }),
        ),
    ]
}
