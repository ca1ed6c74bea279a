//! Sensor frames, the serial-monitor text codec, calibration statistics
//! and survivability scoring.

mod calibration;
mod serial;

pub use calibration::{
    calibration_report, load_calibration_csv, parse_calibration_csv, percentage_error, CalibrationError,
    CalibrationRecord, CalibrationReport, Denominator, Discrepancy, SensorCalibration, SensorSummary,
};
pub use serial::{
    emit_prediction_block, emit_sensor_block, emit_sensor_block_stamped, format_timestamp, parse_prediction_block,
    parse_sensor_block, ParseError, PredictionBlock, SerialDecoder, SerialEvent,
};

use serde::{Deserialize, Serialize};

pub const GAS_MAX: u16 = 1024;

/// One reading of every environmental sensor on the probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    /// MQ135 ADC counts, 0..=1024.
    #[serde(rename = "gas")]
    pub gas_raw: u16,
    pub temp_c: f64,
    pub humidity_pct: f64,
    pub pressure_kpa: f64,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FrameError {
    #[error("gas reading {0} outside 0..=1024")]
    Gas(u16),
    #[error("humidity {0}% outside 0..=100")]
    Humidity(f64),
    #[error("{field} is not finite")]
    NonFinite { field: &'static str },
}

impl SensorFrame {
    pub fn new(gas_raw: u16, temp_c: f64, humidity_pct: f64, pressure_kpa: f64) -> Self {
        Self { gas_raw, temp_c, humidity_pct, pressure_kpa, timestamp_ms: 0 }
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        for (field, v) in [("temp_c", self.temp_c), ("humidity_pct", self.humidity_pct), ("pressure_kpa", self.pressure_kpa)] {
            if !v.is_finite() {
                return Err(FrameError::NonFinite { field });
            }
        }
        if self.gas_raw > GAS_MAX {
            return Err(FrameError::Gas(self.gas_raw));
        }
        if !(0.0..=100.0).contains(&self.humidity_pct) {
            return Err(FrameError::Humidity(self.humidity_pct));
        }
        Ok(())
    }
}

/// Ordered best to worst, so `max` picks the worst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    Good,
    Moderate,
    Poor,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::Good => "Good",
            Level::Moderate => "Moderate",
            Level::Poor => "Poor",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurvivabilityReport {
    pub air: Level,
    pub thermal: Level,
    pub overall: Level,
    pub rationale: Vec<String>,
}

pub const AIR_GOOD_MAX: u16 = 400;
pub const AIR_MODERATE_MAX: u16 = 700;
pub const TEMP_GOOD_C: (f64, f64) = (15.0, 35.0);
pub const HUMIDITY_GOOD_PCT: (f64, f64) = (20.0, 80.0);
pub const TEMP_MARGIN_C: f64 = 5.0;
pub const HUMIDITY_MARGIN_PCT: f64 = 10.0;

fn within(v: f64, (lo, hi): (f64, f64), margin: f64) -> bool {
    v >= lo - margin && v <= hi + margin
}

/// Rule-table assessment of the conditions at the probe.
pub fn survivability(frame: &SensorFrame) -> SurvivabilityReport {
    let air = match frame.gas_raw {
        g if g <= AIR_GOOD_MAX => Level::Good,
        g if g <= AIR_MODERATE_MAX => Level::Moderate,
        _ => Level::Poor,
    };
    let (t, h) = (frame.temp_c, frame.humidity_pct);
    let thermal = if within(t, TEMP_GOOD_C, 0.0) && within(h, HUMIDITY_GOOD_PCT, 0.0) {
        Level::Good
    } else if within(t, TEMP_GOOD_C, TEMP_MARGIN_C) && within(h, HUMIDITY_GOOD_PCT, HUMIDITY_MARGIN_PCT) {
        Level::Moderate
    } else {
        Level::Poor
    };
    let rationale = vec![
        format!("air {air}: gas {} (good <= {AIR_GOOD_MAX}, moderate <= {AIR_MODERATE_MAX})", frame.gas_raw),
        format!(
            "thermal {thermal}: {t:.2} C vs good band {}-{} C, {h:.2}% vs good band {}-{}%",
            TEMP_GOOD_C.0, TEMP_GOOD_C.1, HUMIDITY_GOOD_PCT.0, HUMIDITY_GOOD_PCT.1
        ),
    ];
    SurvivabilityReport { air, thermal, overall: air.max(thermal), rationale }
}
