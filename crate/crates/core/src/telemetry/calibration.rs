//! Percentage-error statistics of probe sensors against reference meters.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("percentage error undefined: {which} value is zero")]
    ZeroDenominator { which: Denominator },
    #[error("no calibration records")]
    Empty,
    #[error("sensor {0:?} has no records")]
    EmptySensor(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad metadata line {0:?}")]
    Metadata(String),
}

pub type Result<T> = std::result::Result<T, CalibrationError>;

/// Which reading divides the absolute deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    #[default]
    Reference,
    Measured,
}

impl std::fmt::Display for Denominator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Denominator::Reference => "reference",
            Denominator::Measured => "measured",
        })
    }
}

impl FromStr for Denominator {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "reference" => Ok(Denominator::Reference),
            "measured" => Ok(Denominator::Measured),
            other => Err(format!("unknown denominator {other:?}")),
        }
    }
}

/// `100 * |measured - reference| / denominator`.
pub fn percentage_error(reference: f64, measured: f64, denominator: Denominator) -> Result<f64> {
    let d = match denominator {
        Denominator::Reference => reference,
        Denominator::Measured => measured,
    };
    if d == 0.0 {
        return Err(CalibrationError::ZeroDenominator { which: denominator });
    }
    Ok(100.0 * (measured - reference).abs() / d.abs())
}

/// A CSV row: the two readings plus, optionally, the percentage printed
/// alongside them in the source table (kept as text to preserve precision).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub reference: f64,
    pub measured: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub printed_pct_error: Option<String>,
}

impl CalibrationRecord {
    pub fn deviation(&self) -> f64 {
        self.measured - self.reference
    }
}

/// One sensor's records with the figures stated for it, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorCalibration {
    pub sensor: String,
    pub unit: String,
    pub denominator: Denominator,
    pub stated_average_pct: Option<String>,
    pub stated_accuracy_pct: Option<String>,
    pub records: Vec<CalibrationRecord>,
}

/// Reads `reference,measured[,printed_pct_error]` rows. Leading `# key: value`
/// lines set `sensor`, `unit`, `denominator`, `stated_average_pct` and
/// `stated_accuracy_pct`; the sensor name defaults to `default_name`.
pub fn parse_calibration_csv(text: &str, default_name: &str) -> Result<SensorCalibration> {
    let mut cal = SensorCalibration {
        sensor: default_name.to_string(),
        unit: String::new(),
        denominator: Denominator::default(),
        stated_average_pct: None,
        stated_accuracy_pct: None,
        records: Vec::new(),
    };
    for line in text.lines().map(str::trim).filter(|l| l.starts_with('#')) {
        let body = line.trim_start_matches('#').trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body.split_once(':').ok_or_else(|| CalibrationError::Metadata(line.to_string()))?;
        let v = v.trim().to_string();
        match k.trim() {
            "sensor" => cal.sensor = v,
            "unit" => cal.unit = v,
            "denominator" => cal.denominator = v.parse().map_err(|_| CalibrationError::Metadata(line.to_string()))?,
            "stated_average_pct" => cal.stated_average_pct = Some(v),
            "stated_accuracy_pct" => cal.stated_accuracy_pct = Some(v),
            _ => {}
        }
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).flexible(true).from_reader(text.as_bytes());
    for row in rdr.deserialize() {
        let mut rec: CalibrationRecord = row?;
        rec.printed_pct_error = rec.printed_pct_error.map(|s| s.trim_end_matches('%').to_string()).filter(|s| !s.is_empty());
        cal.records.push(rec);
    }
    Ok(cal)
}

pub fn load_calibration_csv(path: impl AsRef<Path>) -> Result<SensorCalibration> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| CalibrationError::Io { path: path.display().to_string(), source })?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_calibration_csv(&text, &stem)
}

fn decimals(printed: &str) -> usize {
    printed.split_once('.').map_or(0, |(_, f)| f.len())
}

fn render(v: f64, places: usize) -> String {
    format!("{v:.places$}")
}

/// A figure stated in the source that does not match its recomputation at
/// the stated precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub sensor: String,
    pub quantity: String,
    pub stated: String,
    pub recomputed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub reference: f64,
    pub measured: f64,
    pub deviation: f64,
    pub pct_error: f64,
    pub printed_pct_error: Option<String>,
    /// Whether `pct_error`, rendered at the printed precision, equals the print.
    pub matches_print: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSummary {
    pub sensor: String,
    pub unit: String,
    pub denominator: Denominator,
    pub rows: Vec<RowResult>,
    pub average_pct_error: f64,
    /// Mean of the printed per-row values, when every row has one.
    pub printed_average_pct_error: Option<f64>,
    pub accuracy_pct: f64,
    pub stated_average_pct: Option<String>,
    pub stated_accuracy_pct: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub sensors: Vec<SensorSummary>,
    /// Mean of recomputed sensor accuracies.
    pub collective_accuracy_pct: f64,
    /// Mean of the stated sensor accuracies, when all are stated.
    pub stated_collective_accuracy_pct: Option<f64>,
    pub discrepancies: Vec<Discrepancy>,
}

pub fn calibration_report(sensors: &[SensorCalibration]) -> Result<CalibrationReport> {
    if sensors.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let mut summaries = Vec::with_capacity(sensors.len());
    let mut discrepancies = Vec::new();
    for s in sensors {
        if s.records.is_empty() {
            return Err(CalibrationError::EmptySensor(s.sensor.clone()));
        }
        let mut rows = Vec::with_capacity(s.records.len());
        for r in &s.records {
            let pct = percentage_error(r.reference, r.measured, s.denominator)?;
            let matches_print = r.printed_pct_error.as_ref().map(|p| render(pct, decimals(p)) == *p);
            rows.push(RowResult {
                reference: r.reference,
                measured: r.measured,
                deviation: r.deviation(),
                pct_error: pct,
                printed_pct_error: r.printed_pct_error.clone(),
                matches_print,
            });
        }
        let n = rows.len() as f64;
        let average = rows.iter().map(|r| r.pct_error).sum::<f64>() / n;
        let printed: Option<Vec<f64>> =
            rows.iter().map(|r| r.printed_pct_error.as_ref().and_then(|p| p.parse().ok())).collect();
        let accuracy = 100.0 - average;
        let mut flag = |quantity: &str, stated: &Option<String>, value: f64| {
            if let Some(st) = stated {
                if render(value, decimals(st)) != *st {
                    discrepancies.push(Discrepancy {
                        sensor: s.sensor.clone(),
                        quantity: quantity.into(),
                        stated: st.clone(),
                        recomputed: value,
                    });
                }
            }
        };
        flag("average_pct_error", &s.stated_average_pct, average);
        flag("accuracy_pct", &s.stated_accuracy_pct, accuracy);
        summaries.push(SensorSummary {
            sensor: s.sensor.clone(),
            unit: s.unit.clone(),
            denominator: s.denominator,
            rows,
            average_pct_error: average,
            printed_average_pct_error: printed.map(|p| p.iter().sum::<f64>() / n),
            accuracy_pct: accuracy,
            stated_average_pct: s.stated_average_pct.clone(),
            stated_accuracy_pct: s.stated_accuracy_pct.clone(),
        });
    }
    let collective = summaries.iter().map(|s| s.accuracy_pct).sum::<f64>() / summaries.len() as f64;
    let stated: Option<Vec<f64>> =
        summaries.iter().map(|s| s.stated_accuracy_pct.as_ref().and_then(|a| a.parse().ok())).collect();
    let stated_collective = stated.map(|v| v.iter().sum::<f64>() / v.len() as f64);
    if let Some(sc) = stated_collective {
        let places = summaries.iter().filter_map(|s| s.stated_accuracy_pct.as_deref()).map(decimals).max().unwrap_or(3);
        if render(sc, places) != render(collective, places) {
            discrepancies.push(Discrepancy {
                sensor: "all".into(),
                quantity: "collective_accuracy_pct".into(),
                stated: render(sc, places),
                recomputed: collective,
            });
        }
    }
    Ok(CalibrationReport {
        sensors: summaries,
        collective_accuracy_pct: collective,
        stated_collective_accuracy_pct: stated_collective,
        discrepancies,
    })
}

impl CalibrationReport {
    /// Per-sensor tables with deviation and percentage error, then the
    /// averages, accuracies and any discrepancy flags.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.sensors {
            let unit = if s.unit.is_empty() { String::new() } else { format!(" ({})", s.unit) };
            let _ = writeln!(out, "{}{unit}, error relative to {} value", s.sensor, s.denominator);
            let _ = writeln!(out, "{:>4}  {:>10}  {:>10}  {:>10}  {:>12}  {:>10}", "#", "reference", "measured", "deviation", "pct_error", "printed");
            for (i, r) in s.rows.iter().enumerate() {
                let places = r.printed_pct_error.as_deref().map_or(4, decimals);
                let _ = writeln!(
                    out,
                    "{:>4}  {:>10}  {:>10}  {:>+10.3}  {:>11}%  {:>10}",
                    i + 1,
                    r.reference,
                    r.measured,
                    r.deviation,
                    render(r.pct_error, places),
                    r.printed_pct_error.as_deref().map_or("-".to_string(), |p| format!("{p}%")),
                );
            }
            let _ = writeln!(out, "average percentage error: {:.5}%", s.average_pct_error);
            if let Some(p) = s.printed_average_pct_error {
                let _ = writeln!(out, "mean of printed errors:   {p:.5}%");
            }
            if let Some(st) = &s.stated_average_pct {
                let _ = writeln!(out, "stated average:           {st}%");
            }
            let _ = writeln!(out, "accuracy: {:.3}%", s.accuracy_pct);
            if let Some(st) = &s.stated_accuracy_pct {
                let _ = writeln!(out, "stated accuracy: {st}%");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "collective accuracy (recomputed): {:.3}%", self.collective_accuracy_pct);
        if let Some(sc) = self.stated_collective_accuracy_pct {
            let _ = writeln!(out, "collective accuracy (stated sensor accuracies): {sc:.3}%");
        }
        for d in &self.discrepancies {
            let _ = writeln!(out, "DISCREPANCY {} {}: stated {} vs recomputed {:.5}", d.sensor, d.quantity, d.stated, d.recomputed);
        }
        out
    }
}
