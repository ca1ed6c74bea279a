//! Browser bindings. Every export takes plain numbers or strings and
//! returns a JSON string, so the page needs no generated type glue.

use rubble_core::dsp::{Frontend, MelFilterbank};
use rubble_core::synth::{generate_named, generate_silence};
use rubble_core::telemetry::{survivability, SensorFrame};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn error(msg: impl std::fmt::Display) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

fn spectrogram_value(label: &str, seed: u64) -> Result<Value, String> {
    let clip = if label == "silent" { generate_silence(seed) } else { generate_named(label, seed).map_err(|e| e.to_string())? };
    let fe = Frontend::default();
    let m = fe.build().and_then(|x| x.extract(&clip)).map_err(|e| e.to_string())?;
    let (rows, cols) = m.shape();
    let values: Vec<f64> = (0..rows).flat_map(|r| m.row(r).to_vec()).collect();
    let peak = clip.samples.iter().map(|s| s.unsigned_abs()).max().unwrap_or(0);
    Ok(json!({
        "label": label,
        "seed": seed,
        "rows": rows,
        "cols": cols,
        "values": values,
        "low_hz": fe.f_low_hz,
        "high_hz": fe.f_high_hz,
        "peak_sample": peak,
    }))
}

/// Synthesizes a one-second clip of `label` (or `silent`) and returns its
/// log mel energies as `{rows, cols, values}` in row-major frame order.
#[wasm_bindgen]
pub fn synth_spectrogram(label: &str, seed: u32) -> String {
    spectrogram_value(label, u64::from(seed)).map_or_else(error, |v| v.to_string())
}

/// Triangular filter weights over FFT bins plus band edges.
#[wasm_bindgen]
pub fn filterbank_curves(num_filters: u32, f_low_hz: f64, f_high_hz: f64) -> String {
    let fe = Frontend::default();
    match MelFilterbank::new(fe.sample_rate_hz, fe.frame.fft_size, num_filters as usize, f_low_hz, f_high_hz) {
        Ok(b) => {
            let bin_hz = f64::from(fe.sample_rate_hz) / fe.frame.fft_size as f64;
            json!({
                "bin_hz": bin_hz,
                "bins": b.num_bins(),
                "edges_hz": b.edges_hz,
                "weights": b.weights,
            })
            .to_string()
        }
        Err(e) => error(e),
    }
}

/// Air, thermal and overall levels with the rule that decided each.
#[wasm_bindgen]
pub fn assess(gas_raw: u32, temp_c: f64, humidity_pct: f64) -> String {
    let gas = match u16::try_from(gas_raw) {
        Ok(g) => g,
        Err(_) => return error(format!("gas reading {gas_raw} outside 0..=1024")),
    };
    let frame = SensorFrame::new(gas, temp_c, humidity_pct, 0.0);
    if let Err(e) = frame.validate() {
        return error(e);
    }
    serde_json::to_string(&survivability(&frame)).expect("report serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn spectrogram_has_clip_shape() {
        let v = parse(&synth_spectrogram("cough", 3));
        assert_eq!((v["rows"].as_u64(), v["cols"].as_u64()), (Some(61), Some(40)));
        assert_eq!(v["values"].as_array().unwrap().len(), 61 * 40);
        assert!(parse(&synth_spectrogram("silent", 1))["values"].is_array());
        assert!(parse(&synth_spectrogram("whistle", 1))["error"].is_string());
    }

    #[test]
    fn curves_cover_band() {
        let v = parse(&filterbank_curves(40, 300.0, 8000.0));
        assert_eq!(v["weights"].as_array().unwrap().len(), 40);
        assert_eq!(v["edges_hz"].as_array().unwrap().len(), 42);
        assert!(parse(&filterbank_curves(40, 9000.0, 300.0))["error"].is_string());
    }

    #[test]
    fn assess_levels() {
        let v = parse(&assess(168, 32.67, 52.81));
        assert_eq!(v["overall"], "Good");
        assert_eq!(parse(&assess(900, 25.0, 50.0))["air"], "Poor");
        assert!(parse(&assess(5000, 25.0, 50.0))["error"].is_string());
        assert!(parse(&assess(100, 25.0, 150.0))["error"].is_string());
    }
}
