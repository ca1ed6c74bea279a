//! Kinematic probe on a rubble grid, sampling audio and sensors every cycle.

use std::f64::consts::TAU;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::AudioClip;
use crate::labels::Label;
use crate::pipeline::{Classifier, PipelineError};
use crate::synth::{generate_clip, generate_silence, mix_seed};
use crate::telemetry::{PredictionBlock, SensorFrame, GAS_MAX};
use crate::tuner::{estimate_cost, CandidateConfig, DeviceBudget};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed map: {0}")]
    Malformed(String),
    #[error("cell ({x}, {y}): {message}")]
    CellRange { x: usize, y: usize, message: String },
    #[error("map dimensions: {0}")]
    Dimensions(String),
    #[error("command log line {line}: {message}")]
    CommandLog { line: usize, message: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// What a cell sounds like: one of the classes, or nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ambient {
    Silent,
    Breathes,
    Cough,
    HelloHelp,
    MuffledWords,
    Noise,
}

impl Ambient {
    pub fn label(self) -> Option<Label> {
        match self {
            Ambient::Silent => None,
            Ambient::Breathes => Some(Label::Breathes),
            Ambient::Cough => Some(Label::Cough),
            Ambient::HelloHelp => Some(Label::HelloHelp),
            Ambient::MuffledWords => Some(Label::MuffledWords),
            Ambient::Noise => Some(Label::Noise),
        }
    }
}

impl From<Label> for Ambient {
    fn from(l: Label) -> Self {
        match l {
            Label::Breathes => Ambient::Breathes,
            Label::Cough => Ambient::Cough,
            Label::HelloHelp => Ambient::HelloHelp,
            Label::MuffledWords => Ambient::MuffledWords,
            Label::Noise => Ambient::Noise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub ambient: Ambient,
    pub temp_c: f64,
    pub humidity_pct: f64,
    pub pressure_kpa: f64,
    pub gas_raw: u16,
}

impl Cell {
    pub fn as_frame(&self) -> SensorFrame {
        SensorFrame::new(self.gas_raw, self.temp_c, self.humidity_pct, self.pressure_kpa)
    }
}

/// Row-major `width x height` grid of square cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RubbleMap {
    pub width: usize,
    pub height: usize,
    pub cell_size_m: f64,
    pub cells: Vec<Cell>,
}

impl RubbleMap {
    pub fn uniform(width: usize, height: usize, cell_size_m: f64, cell: Cell) -> Self {
        Self { width, height, cell_size_m, cells: vec![cell; width * height] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(SimError::Dimensions(format!("{}x{} grid is empty", self.width, self.height)));
        }
        if !(self.cell_size_m > 0.0 && self.cell_size_m.is_finite()) {
            return Err(SimError::Dimensions(format!("cell size {} must be positive", self.cell_size_m)));
        }
        if self.cells.len() != self.width * self.height {
            return Err(SimError::Dimensions(format!(
                "{} cells for a {}x{} grid",
                self.cells.len(),
                self.width,
                self.height
            )));
        }
        for (i, c) in self.cells.iter().enumerate() {
            c.as_frame().validate().map_err(|e| SimError::CellRange {
                x: i % self.width,
                y: i / self.width,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: RubbleMap = serde_json::from_str(text).map_err(|e| SimError::Malformed(e.to_string()))?;
        map.validate()?;
        Ok(map)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map serializes") + "\n"
    }

    pub fn bounds(&self) -> Bounds {
        Bounds { width_m: self.width as f64 * self.cell_size_m, height_m: self.height as f64 * self.cell_size_m }
    }

    /// Cell under a position; positions on the far wall belong to the last cell.
    pub fn cell_at(&self, x: f64, y: f64) -> &Cell {
        let col = ((x / self.cell_size_m).floor().max(0.0) as usize).min(self.width - 1);
        let row = ((y / self.cell_size_m).floor().max(0.0) as usize).min(self.height - 1);
        &self.cells[row * self.width + col]
    }
}

pub fn load_map(path: impl AsRef<Path>) -> Result<RubbleMap> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|source| SimError::Io { path: path.display().to_string(), source })?;
    RubbleMap::from_json(&text)
}

pub fn save_map(map: &RubbleMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, map.to_json()).map_err(|source| SimError::Io { path: path.display().to_string(), source })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub width_m: f64,
    pub height_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Reverse,
    Left,
    Right,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveCommand {
    pub direction: Direction,
    pub magnitude: f64,
}

impl DriveCommand {
    pub const STOP: DriveCommand = DriveCommand { direction: Direction::Stop, magnitude: 0.0 };

    pub fn new(direction: Direction, magnitude: f64) -> Self {
        Self { direction, magnitude }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.magnitude)
    }
}

/// A drive command stamped with the session time it was issued.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedCommand {
    pub t_ms: u64,
    #[serde(flatten)]
    pub command: DriveCommand,
}

/// Reads a JSONL command log; blank lines are skipped.
pub fn parse_command_log(text: &str) -> Result<Vec<TimedCommand>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let c: TimedCommand =
            serde_json::from_str(line).map_err(|e| SimError::CommandLog { line: i + 1, message: e.to_string() })?;
        if !c.command.is_valid() {
            return Err(SimError::CommandLog { line: i + 1, message: format!("magnitude {} outside [0, 1]", c.command.magnitude) });
        }
        out.push(c);
    }
    Ok(out)
}

pub fn command_log_jsonl(commands: &[TimedCommand]) -> String {
    commands.iter().map(|c| serde_json::to_string(c).expect("command serializes") + "\n").collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kinematics {
    pub max_speed_mps: f64,
    pub max_turn_rate_rps: f64,
}

impl Default for Kinematics {
    fn default() -> Self {
        Self { max_speed_mps: 0.5, max_turn_rate_rps: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeState {
    pub x: f64,
    pub y: f64,
    /// Radians counter-clockwise from +x, in `[0, 2π)`.
    pub heading: f64,
    /// Signed forward speed in m/s.
    pub speed: f64,
    /// Signed turn rate in rad/s.
    pub turn_rate: f64,
    /// Completed cycles.
    pub cycle: u64,
}

impl ProbeState {
    pub fn at(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading: heading.rem_euclid(TAU), speed: 0.0, turn_rate: 0.0, cycle: 0 }
    }

    pub fn pose(&self) -> Pose {
        Pose { x: self.x, y: self.y, heading: self.heading }
    }
}

/// Holds `cmd` for `dt_s` seconds: translation along the heading for
/// forward/reverse, rotation in place for left/right. Position is clamped
/// to the map walls.
pub fn apply_drive(state: &ProbeState, cmd: &DriveCommand, dt_s: f64, bounds: Bounds, k: &Kinematics) -> ProbeState {
    let m = cmd.magnitude.clamp(0.0, 1.0);
    let (speed, turn_rate) = match cmd.direction {
        Direction::Forward => (m * k.max_speed_mps, 0.0),
        Direction::Reverse => (-m * k.max_speed_mps, 0.0),
        Direction::Left => (0.0, m * k.max_turn_rate_rps),
        Direction::Right => (0.0, -m * k.max_turn_rate_rps),
        Direction::Stop => (0.0, 0.0),
    };
    let mut s = *state;
    s.speed = speed;
    s.turn_rate = turn_rate;
    if speed != 0.0 {
        s.x = (s.x + speed * s.heading.cos() * dt_s).clamp(0.0, bounds.width_m);
        s.y = (s.y + speed * s.heading.sin() * dt_s).clamp(0.0, bounds.height_m);
    }
    if turn_rate != 0.0 {
        s.heading = (s.heading + turn_rate * dt_s).rem_euclid(TAU);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorNoise {
    pub temp_c: f64,
    pub humidity_pct: f64,
    pub pressure_kpa: f64,
    pub gas: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        Self { temp_c: 0.1, humidity_pct: 0.2, pressure_kpa: 0.001, gas: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub cycle_ms: u64,
    pub kinematics: Kinematics,
    pub noise: SensorNoise,
    /// Starting pose; `None` starts at the map center facing +x.
    pub start: Option<Pose>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { seed: 42, cycle_ms: 2000, kinematics: Kinematics::default(), noise: SensorNoise::default(), start: None }
    }
}

/// Everything observed in one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    pub cycle: u64,
    pub t_ms: u64,
    pub pose: Pose,
    pub ambient: Ambient,
    pub frame: SensorFrame,
    pub prediction: Option<PredictionBlock>,
    pub clip: AudioClip,
}

const AUDIO_STREAM: u64 = 0xA0D1_0000;
const SENSOR_STREAM: u64 = 0x5E45_0000;

/// The simulated probe. The output of cycle `k` depends only on the map,
/// the seed, the model and the commands issued up to time `k * cycle_ms`.
#[derive(Debug, Clone)]
pub struct Simulator {
    map: RubbleMap,
    classifier: Option<Arc<Classifier>>,
    cfg: SimConfig,
    state: ProbeState,
    drive: DriveCommand,
    timings: (u64, u64),
}

impl Simulator {
    pub fn new(map: RubbleMap, classifier: Option<Arc<Classifier>>, cfg: SimConfig) -> Result<Self> {
        map.validate()?;
        let b = map.bounds();
        let start = cfg.start.unwrap_or(Pose { x: b.width_m / 2.0, y: b.height_m / 2.0, heading: 0.0 });
        let state = ProbeState::at(start.x.clamp(0.0, b.width_m), start.y.clamp(0.0, b.height_m), start.heading);
        let timings = classifier.as_deref().map_or((0, 0), |c| {
            let cand = CandidateConfig { id: String::new(), frontend: c.frontend.clone(), model: c.spec.clone() };
            estimate_cost(&cand, &DeviceBudget::default())
                .map_or((0, 0), |e| (e.dsp_latency_ms.round() as u64, e.inference_latency_ms.round() as u64))
        });
        Ok(Self { map, classifier, cfg, state, drive: DriveCommand::STOP, timings })
    }

    pub fn state(&self) -> &ProbeState {
        &self.state
    }

    pub fn map(&self) -> &RubbleMap {
        &self.map
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Time stamp of the next cycle.
    pub fn next_tick_ms(&self) -> u64 {
        (self.state.cycle + 1) * self.cfg.cycle_ms
    }

    /// Latches a drive command; it stays in effect until replaced.
    pub fn command(&mut self, cmd: DriveCommand) {
        if cmd.is_valid() {
            self.drive = cmd;
        }
    }

    /// Runs one cycle: moves under the latched command, then records a clip
    /// and reads the sensors at the new position.
    pub fn tick(&mut self) -> Result<TickOutput> {
        let dt = self.cfg.cycle_ms as f64 / 1000.0;
        self.state = apply_drive(&self.state, &self.drive, dt, self.map.bounds(), &self.cfg.kinematics);
        self.state.cycle += 1;
        let cycle = self.state.cycle;
        let t_ms = cycle * self.cfg.cycle_ms;
        let cell = *self.map.cell_at(self.state.x, self.state.y);

        let audio_seed = mix_seed(self.cfg.seed, AUDIO_STREAM + cycle);
        let clip = match cell.ambient.label() {
            Some(l) => generate_clip(l, audio_seed),
            None => generate_silence(audio_seed),
        };
        let frame = self.sense(&cell, cycle, t_ms);
        let prediction = match &self.classifier {
            Some(c) => {
                let p = c.predict(&clip)?;
                let mut probabilities = [0.0; crate::labels::NUM_CLASSES];
                probabilities.copy_from_slice(&p.probabilities);
                Some(PredictionBlock { dsp_ms: self.timings.0, classification_ms: self.timings.1, anomaly_ms: 0, probabilities })
            }
            None => None,
        };
        Ok(TickOutput { cycle, t_ms, pose: self.state.pose(), ambient: cell.ambient, frame, prediction, clip })
    }

    fn sense(&self, cell: &Cell, cycle: u64, t_ms: u64) -> SensorFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, SENSOR_STREAM + cycle));
        let n = &self.cfg.noise;
        let mut gauss = |sigma: f64| if sigma > 0.0 { Normal::new(0.0, sigma).expect("finite sigma").sample(&mut rng) } else { 0.0 };
        let temp_c = cell.temp_c + gauss(n.temp_c);
        let humidity_pct = (cell.humidity_pct + gauss(n.humidity_pct)).clamp(0.0, 100.0);
        let pressure_kpa = cell.pressure_kpa + gauss(n.pressure_kpa);
        let gas = (cell.gas_raw as f64 + gauss(n.gas)).round().clamp(0.0, GAS_MAX as f64) as u16;
        SensorFrame { gas_raw: gas, temp_c, humidity_pct, pressure_kpa, timestamp_ms: t_ms }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn cell(ambient: Ambient) -> Cell {
        Cell { ambient, temp_c: 30.0, humidity_pct: 50.0, pressure_kpa: 101.3, gas_raw: 200 }
    }

    const B: Bounds = Bounds { width_m: 10.0, height_m: 10.0 };

    #[test]
    fn stop_keeps_pose() {
        let s = ProbeState::at(3.0, 4.0, 1.0);
        let t = apply_drive(&s, &DriveCommand::STOP, 2.0, B, &Kinematics::default());
        assert_eq!(t.pose(), s.pose());
    }

    #[test]
    fn forward_and_turn() {
        let k = Kinematics::default();
        let s = ProbeState::at(2.0, 2.0, PI / 4.0);
        let t = apply_drive(&s, &DriveCommand::new(Direction::Forward, 1.0), 2.0, B, &k);
        assert!(((t.x - s.x).hypot(t.y - s.y) - 1.0).abs() < 1e-9);
        assert!(((t.y - s.y).atan2(t.x - s.x) - PI / 4.0).abs() < 1e-9);
        let r = apply_drive(&ProbeState::at(1.0, 1.0, 0.0), &DriveCommand::new(Direction::Left, 1.0), PI, B, &k);
        assert!((r.heading - PI).abs() < 1e-9);
        let back = apply_drive(&ProbeState::at(5.0, 5.0, 0.0), &DriveCommand::new(Direction::Reverse, 0.5), 2.0, B, &k);
        assert!((back.x - 4.5).abs() < 1e-12);
    }

    #[test]
    fn walls_clamp() {
        let t = apply_drive(&ProbeState::at(9.9, 5.0, 0.0), &DriveCommand::new(Direction::Forward, 1.0), 10.0, B, &Kinematics::default());
        assert_eq!(t.x, 10.0);
    }

    #[test]
    fn map_validation_and_round_trip() {
        let m = RubbleMap::uniform(1, 1, 1.0, cell(Ambient::Silent));
        m.validate().unwrap();
        assert_eq!(RubbleMap::from_json(&m.to_json()).unwrap(), m);
        let mut bad = m.clone();
        bad.cells[0].gas_raw = 2000;
        assert!(matches!(bad.validate(), Err(SimError::CellRange { x: 0, y: 0, .. })));
        let unknown = m.to_json().replace("\"silent\"", "\"laughter\"");
        assert!(matches!(RubbleMap::from_json(&unknown), Err(SimError::Malformed(_))));
        let missing = m.to_json().replace("\"temp_c\": 30.0,", "");
        assert!(matches!(RubbleMap::from_json(&missing), Err(SimError::Malformed(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_map(&m, &p).unwrap();
        assert_eq!(load_map(&p).unwrap(), m);
    }

    #[test]
    fn identical_seeds_identical_ticks() {
        let map = RubbleMap::uniform(3, 3, 2.0, cell(Ambient::Cough));
        let run = || {
            let mut s = Simulator::new(map.clone(), None, SimConfig::default()).unwrap();
            s.command(DriveCommand::new(Direction::Forward, 0.7));
            (0..5).map(|_| s.tick().unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn temperature_noise_has_configured_spread() {
        let map = RubbleMap::uniform(1, 1, 1.0, cell(Ambient::Silent));
        let mut s = Simulator::new(map, None, SimConfig { seed: 5, ..Default::default() }).unwrap();
        let temps: Vec<f64> = (0..1000).map(|_| s.tick().unwrap().frame.temp_c).collect();
        let mean = temps.iter().sum::<f64>() / 1000.0;
        let sd = (temps.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
        assert!((0.08..=0.12).contains(&sd), "{sd}");
    }

    #[test]
    fn command_log_round_trip() {
        let cmds = vec![
            TimedCommand { t_ms: 1, command: DriveCommand::new(Direction::Forward, 1.0) },
            TimedCommand { t_ms: 4001, command: DriveCommand::new(Direction::Left, 0.25) },
        ];
        let text = command_log_jsonl(&cmds);
        assert_eq!(text.lines().next().unwrap(), r#"{"t_ms":1,"direction":"forward","magnitude":1.0}"#);
        assert_eq!(parse_command_log(&text).unwrap(), cmds);
        assert!(parse_command_log("{\"t_ms\":1,\"direction\":\"up\",\"magnitude\":1}").is_err());
        assert!(parse_command_log("{\"t_ms\":1,\"direction\":\"stop\",\"magnitude\":2}").is_err());
    }

    fn commands() -> impl Strategy<Value = Vec<(u8, f64, f64)>> {
        prop::collection::vec((0u8..5, 0.0f64..=1.0, 0.01f64..20.0), 1..40)
    }

    proptest! {
        #[test]
        fn never_leaves_the_map(cmds in commands(), x in 0.0f64..7.0, y in 0.0f64..3.0, h in 0.0f64..TAU) {
            let b = Bounds { width_m: 7.0, height_m: 3.0 };
            let mut s = ProbeState::at(x, y, h);
            for (d, m, dt) in cmds {
                let dir = [Direction::Forward, Direction::Reverse, Direction::Left, Direction::Right, Direction::Stop][d as usize];
                s = apply_drive(&s, &DriveCommand::new(dir, m), dt, b, &Kinematics::default());
                prop_assert!((0.0..=7.0).contains(&s.x) && (0.0..=3.0).contains(&s.y));
                prop_assert!((0.0..TAU).contains(&s.heading));
            }
        }
    }
}
