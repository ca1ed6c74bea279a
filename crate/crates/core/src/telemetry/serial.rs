//! Text blocks printed by the probe firmware on its serial monitor.
//!
//! Lines may carry the monitor's `HH:MM:SS.mmm -> ` prefix; the first one
//! found in a block becomes the frame timestamp (milliseconds since
//! midnight).

use serde::{Deserialize, Serialize};

use super::SensorFrame;
use crate::labels::{Decision, Label, NUM_CLASSES};
use crate::nn::classify;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("missing field {0}")]
    MissingField(&'static str),
    #[error("invalid value for {field}: {text:?}")]
    InvalidValue { field: &'static str, text: String },
    #[error("unknown label line {0:?}")]
    UnknownLabel(String),
    #[error("label {0} appears twice")]
    DuplicateLabel(Label),
    #[error("value line {0:?} without a preceding label")]
    UnexpectedValue(String),
    #[error("probabilities sum to {0}, expected 1 +/- 0.02")]
    ProbabilitySum(f64),
    #[error("gas reading {0} outside 0..=1024")]
    GasRange(u64),
    #[error("incomplete block at end of stream")]
    Incomplete,
}

pub type Result<T> = std::result::Result<T, ParseError>;

const SUM_TOLERANCE: f64 = 0.02;
const DAY_MS: u64 = 86_400_000;

/// Header timings plus class probabilities in canonical label order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionBlock {
    pub dsp_ms: u64,
    pub classification_ms: u64,
    pub anomaly_ms: u64,
    pub probabilities: [f64; NUM_CLASSES],
}

impl PredictionBlock {
    pub fn decision(&self, threshold: f64) -> Decision {
        classify(&self.probabilities, threshold)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.probabilities.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE + 1e-9 || self.probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(ParseError::ProbabilitySum(sum));
        }
        Ok(())
    }
}

/// `HH:MM:SS.mmm`, wrapping at midnight.
pub fn format_timestamp(ms: u64) -> String {
    let ms = ms % DAY_MS;
    format!("{:02}:{:02}:{:02}.{:03}", ms / 3_600_000, ms / 60_000 % 60, ms / 1000 % 60, ms % 1000)
}

fn parse_timestamp(s: &str) -> Option<u64> {
    let b = s.as_bytes();
    if b.len() != 12 || b[2] != b':' || b[5] != b':' || b[8] != b'.' {
        return None;
    }
    let num = |r: std::ops::Range<usize>| s.get(r)?.parse::<u64>().ok();
    let (h, m, sec, ms) = (num(0..2)?, num(3..5)?, num(6..8)?, num(9..12)?);
    (h < 24 && m < 60 && sec < 60).then(|| ((h * 60 + m) * 60 + sec) * 1000 + ms)
}

/// Splits off the monitor prefix and surrounding whitespace.
fn split_line(raw: &str) -> (Option<u64>, &str) {
    let line = raw.trim_end_matches(['\r', '\n']);
    if let Some((head, rest)) = line.split_once("->") {
        if let Some(ts) = parse_timestamp(head.trim()) {
            return (Some(ts), rest.trim());
        }
    }
    (None, line.trim())
}

/// Leading numeric part of `s`, e.g. "32.67" from "32.67 °C".
fn number_prefix(s: &str) -> &str {
    let s = s.trim_start();
    let end = s
        .char_indices()
        .find(|&(i, c)| !(c.is_ascii_digit() || c == '.' || ((c == '-' || c == '+') && i == 0)))
        .map_or(s.len(), |(i, _)| i);
    &s[..end]
}

fn parse_f64(field: &'static str, text: &str) -> Result<f64> {
    let n = number_prefix(text);
    n.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| ParseError::InvalidValue { field, text: text.to_string() })
}

/// Value after `name` followed by `=` or `:` when `line` starts with `name`
/// (case-insensitive).
fn field_text<'a>(line: &'a str, name: &str) -> Option<&'a str> {
    let head = line.get(..name.len())?;
    if !head.eq_ignore_ascii_case(name) {
        return None;
    }
    let rest = line[name.len()..].trim_start();
    rest.strip_prefix('=').or_else(|| rest.strip_prefix(':')).map(str::trim)
}

fn is_separator(line: &str) -> bool {
    !line.is_empty() && line.chars().all(|c| c == '-')
}

const GAS_HEADER: &str = "gas sensor reading";
const PREDICTION_HEADER: &str = "predictions";

fn starts_with_ci(line: &str, prefix: &str) -> bool {
    line.get(..prefix.len()).is_some_and(|h| h.eq_ignore_ascii_case(prefix))
}

pub fn emit_sensor_block(frame: &SensorFrame) -> String {
    sensor_lines(frame).iter().map(|l| format!("{l}\n")).collect()
}

/// Like [`emit_sensor_block`] with the monitor prefix on every line.
pub fn emit_sensor_block_stamped(frame: &SensorFrame) -> String {
    let ts = format_timestamp(frame.timestamp_ms);
    sensor_lines(frame).iter().map(|l| format!("{ts} -> {l}\n")).collect()
}

fn sensor_lines(f: &SensorFrame) -> Vec<String> {
    vec![
        "GAS Sensor Reading:".into(),
        f.gas_raw.to_string(),
        String::new(),
        String::new(),
        format!("Temperature = {:.2} °C", f.temp_c),
        format!("Humidity= {:.2} %", f.humidity_pct),
        "-----".into(),
        format!("Pressure = {:.2} kPa", f.pressure_kpa),
        "-----".into(),
    ]
}

pub fn parse_sensor_block(text: &str) -> Result<SensorFrame> {
    let mut ts = None;
    let mut gas: Option<u64> = None;
    let mut gas_pending = false;
    let (mut temp, mut hum, mut pres) = (None, None, None);
    for raw in text.lines() {
        let (stamp, line) = split_line(raw);
        if line.is_empty() || is_separator(line) {
            continue;
        }
        ts = ts.or(stamp);
        if starts_with_ci(line, GAS_HEADER) {
            let rest = line[GAS_HEADER.len()..].trim_start_matches(':').trim();
            if rest.is_empty() {
                gas_pending = true;
            } else {
                gas = Some(parse_gas(rest)?);
            }
        } else if gas_pending {
            gas = Some(parse_gas(line)?);
            gas_pending = false;
        } else if let Some(v) = field_text(line, "temperature") {
            temp = Some(parse_f64("temperature", v)?);
        } else if let Some(v) = field_text(line, "humidity") {
            hum = Some(parse_f64("humidity", v)?);
        } else if let Some(v) = field_text(line, "pressure") {
            pres = Some(parse_f64("pressure", v)?);
        }
    }
    Ok(SensorFrame {
        gas_raw: gas.ok_or(ParseError::MissingField("gas"))? as u16,
        temp_c: temp.ok_or(ParseError::MissingField("temperature"))?,
        humidity_pct: hum.ok_or(ParseError::MissingField("humidity"))?,
        pressure_kpa: pres.ok_or(ParseError::MissingField("pressure"))?,
        timestamp_ms: ts.unwrap_or(0),
    })
}

fn parse_gas(text: &str) -> Result<u64> {
    let v: u64 = text.trim().parse().map_err(|_| ParseError::InvalidValue { field: "gas", text: text.to_string() })?;
    if v > super::GAS_MAX as u64 {
        return Err(ParseError::GasRange(v));
    }
    Ok(v)
}

fn emit_label(l: Label) -> &'static str {
    match l {
        Label::HelloHelp => "hello,help",
        other => other.name(),
    }
}

pub fn emit_prediction_block(b: &PredictionBlock) -> String {
    let mut out = format!(
        "Predictions (DSP: {} ms., Classification: {} ms., Anomaly: {} ms.):\n",
        b.dsp_ms, b.classification_ms, b.anomaly_ms
    );
    for l in Label::ALL {
        out.push_str(&format!("{}:\n{:.2}\n", emit_label(l), b.probabilities[l.index()]));
    }
    out
}

/// Integer after `key` and a colon anywhere in the header line.
fn header_ms(line: &str, key: &'static str, field: &'static str) -> Result<u64> {
    let lower = line.to_ascii_lowercase();
    let at = lower.find(key).ok_or(ParseError::MissingField(field))?;
    let rest = line[at + key.len()..].trim_start().trim_start_matches(':');
    let n = number_prefix(rest);
    n.parse().map_err(|_| ParseError::InvalidValue { field, text: rest.to_string() })
}

fn is_value_line(line: &str) -> bool {
    !number_prefix(line).is_empty() && number_prefix(line).len() == line.len()
}

/// Accepts the firmware's irregular spellings: labels with or without a
/// trailing colon, any case, value on the same or the next line.
pub fn parse_prediction_block(text: &str) -> Result<PredictionBlock> {
    let mut header = None;
    let mut probs: [Option<f64>; NUM_CLASSES] = [None; NUM_CLASSES];
    let mut pending: Option<Label> = None;
    for raw in text.lines() {
        let (_, line) = split_line(raw);
        if line.is_empty() {
            continue;
        }
        if header.is_none() {
            if starts_with_ci(line, PREDICTION_HEADER) {
                header = Some((
                    header_ms(line, "dsp", "dsp_ms")?,
                    header_ms(line, "classification", "classification_ms")?,
                    header_ms(line, "anomaly", "anomaly_ms")?,
                ));
            }
            continue;
        }
        if is_value_line(line) {
            let label = pending.take().ok_or_else(|| ParseError::UnexpectedValue(line.to_string()))?;
            probs[label.index()] = Some(parse_f64("probability", line)?);
        } else {
            let (name, value) = match line.split_once(':') {
                Some((n, v)) if !v.trim().is_empty() => (n, Some(v.trim())),
                _ => (line, None),
            };
            let label: Label = name.parse().map_err(|_| ParseError::UnknownLabel(line.to_string()))?;
            if probs[label.index()].is_some() || pending == Some(label) {
                return Err(ParseError::DuplicateLabel(label));
            }
            if let Some(p) = pending.replace(label) {
                return Err(ParseError::InvalidValue { field: "probability", text: format!("{p} has no value") });
            }
            if let Some(v) = value {
                probs[label.index()] = Some(parse_f64("probability", v)?);
                pending = None;
            }
        }
        if probs.iter().all(Option::is_some) {
            break;
        }
    }
    let (dsp_ms, classification_ms, anomaly_ms) = header.ok_or(ParseError::MissingField("predictions header"))?;
    let mut probabilities = [0.0; NUM_CLASSES];
    for l in Label::ALL {
        probabilities[l.index()] = probs[l.index()].ok_or(ParseError::MissingField(l.name()))?;
    }
    let block = PredictionBlock { dsp_ms, classification_ms, anomaly_ms, probabilities };
    block.validate()?;
    Ok(block)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SerialEvent {
    Sensor(SensorFrame),
    Prediction(PredictionBlock),
    /// Any other non-blank line, prefix removed.
    Line(String),
    Error(ParseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Idle,
    Sensor,
    Prediction { values: usize },
}

/// Incremental line-at-a-time decoder for a serial monitor stream.
#[derive(Debug, Clone)]
pub struct SerialDecoder {
    mode: Mode,
    block: String,
}

impl Default for SerialDecoder {
    fn default() -> Self {
        Self::new()
    }
}

impl SerialDecoder {
    pub fn new() -> Self {
        Self { mode: Mode::Idle, block: String::new() }
    }

    pub fn push_line(&mut self, raw: &str) -> Vec<SerialEvent> {
        let (_, line) = split_line(raw);
        let mut out = Vec::new();
        let starts_block = starts_with_ci(line, GAS_HEADER) || starts_with_ci(line, PREDICTION_HEADER);
        if starts_block && self.mode != Mode::Idle {
            out.push(SerialEvent::Error(ParseError::Incomplete));
            self.reset();
        }
        match self.mode {
            Mode::Idle => {
                if starts_with_ci(line, GAS_HEADER) {
                    self.mode = Mode::Sensor;
                    self.append(raw);
                } else if starts_with_ci(line, PREDICTION_HEADER) {
                    self.mode = Mode::Prediction { values: 0 };
                    self.append(raw);
                } else if !line.is_empty() && !is_separator(line) {
                    out.push(SerialEvent::Line(line.to_string()));
                }
            }
            Mode::Sensor => {
                self.append(raw);
                if field_text(line, "pressure").is_some() {
                    out.push(parse_sensor_block(&self.block).map_or_else(SerialEvent::Error, SerialEvent::Sensor));
                    self.reset();
                }
            }
            Mode::Prediction { values } => {
                self.append(raw);
                let has_value = is_value_line(line) || line.split_once(':').is_some_and(|(_, v)| is_value_line(v.trim()));
                let values = values + usize::from(has_value);
                self.mode = Mode::Prediction { values };
                if values == NUM_CLASSES {
                    out.push(parse_prediction_block(&self.block).map_or_else(SerialEvent::Error, SerialEvent::Prediction));
                    self.reset();
                }
            }
        }
        out
    }

    /// Reports a block left open when the stream ends.
    pub fn finish(&mut self) -> Vec<SerialEvent> {
        let open = self.mode != Mode::Idle;
        self.reset();
        if open {
            vec![SerialEvent::Error(ParseError::Incomplete)]
        } else {
            vec![]
        }
    }

    fn append(&mut self, raw: &str) {
        self.block.push_str(raw.trim_end_matches(['\r', '\n']));
        self.block.push('\n');
    }

    fn reset(&mut self) {
        self.mode = Mode::Idle;
        self.block.clear();
    }
}
