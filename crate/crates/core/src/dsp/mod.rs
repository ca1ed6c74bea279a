//! Feature extraction: framing, windowed power spectra, Mel filterbank
//! energies (MFE) and cepstral coefficients (MFCC).
//!
//! Everything here is a pure function of its inputs. Sample values are
//! normalized to `[-1, 1)` by dividing by 32768 before any arithmetic.

mod features;
mod filterbank;
mod spectrum;

pub use features::{
    dct_matrix, mfcc, mfcc_from_mfe, mfe, FeatureExtractor, FeatureMatrix, Frontend,
    FrontendKind,
};
pub use filterbank::{hz_to_mel, mel_to_hz, MelFilterbank};
pub use spectrum::{hamming, power_spectrum, SpectrumAnalyzer};

use serde::{Deserialize, Serialize};

use crate::labels::Label;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Floor applied before taking log10 of filter energies.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DspError {
    #[error("clip has {len} samples but a frame needs {frame_len}")]
    ClipTooShort { len: usize, frame_len: usize },
    #[error("frame has {got} samples, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid frame configuration: {0}")]
    InvalidFrameConfig(String),
    #[error("invalid filterbank band: {0}")]
    InvalidBand(String),
    #[error("requested {num_coeffs} coefficients from {num_filters} filters")]
    TooManyCoefficients { num_coeffs: usize, num_filters: usize },
    #[error("sample rate {got} Hz does not match the filterbank's {expected} Hz")]
    SampleRateMismatch { expected: u32, got: u32 },
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Mono 16-bit PCM audio, normally exactly one second long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioClip {
    pub samples: Vec<i16>,
    pub sample_rate_hz: u32,
    pub label: Option<Label>,
}

impl AudioClip {
    pub fn new(samples: Vec<i16>, sample_rate_hz: u32) -> Self {
        Self { samples, sample_rate_hz, label: None }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Scales every sample by an integer factor, saturating at the i16 range.
    pub fn amplified(&self, factor: i32) -> AudioClip {
        let samples = self
            .samples
            .iter()
            .map(|&s| (s as i32 * factor).clamp(i16::MIN as i32, i16::MAX as i32) as i16)
            .collect();
        AudioClip { samples, ..self.clone() }
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64 / 32768.0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Hamming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameConfig {
    pub frame_len: usize,
    pub stride: usize,
    pub fft_size: usize,
    #[serde(default)]
    pub window: Window,
}

impl Default for FrameConfig {
    /// 32 ms frames with a 16 ms hop at 16 kHz: 61 frames per second.
    fn default() -> Self {
        Self { frame_len: 512, stride: 256, fft_size: 512, window: Window::Hamming }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.frame_len == 0 {
            return Err(DspError::InvalidFrameConfig("frame_len and stride must be positive".into()));
        }
        if self.stride > self.frame_len {
            return Err(DspError::InvalidFrameConfig(format!(
                "stride {} exceeds frame_len {}",
                self.stride, self.frame_len
            )));
        }
        if self.frame_len > self.fft_size {
            return Err(DspError::InvalidFrameConfig(format!(
                "frame_len {} exceeds fft_size {}",
                self.frame_len, self.fft_size
            )));
        }
        if !self.fft_size.is_power_of_two() {
            return Err(DspError::InvalidFrameConfig(format!(
                "fft_size {} is not a power of two",
                self.fft_size
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `floor((n - frame_len) / stride) + 1`, or `None` when no frame fits.
    pub fn frame_count(&self, num_samples: usize) -> Option<usize> {
        if num_samples < self.frame_len || self.stride == 0 {
            return None;
        }
        Some((num_samples - self.frame_len) / self.stride + 1)
    }
}

/// Splits a clip into overlapping frames of normalized samples. Trailing
/// samples that do not fill a frame are dropped.
pub fn frame_signal(clip: &AudioClip, cfg: &FrameConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let count = cfg.frame_count(clip.samples.len()).ok_or(DspError::ClipTooShort {
        len: clip.samples.len(),
        frame_len: cfg.frame_len,
    })?;
    let frames = (0..count)
        .map(|i| {
            let start = i * cfg.stride;
            clip.samples[start..start + cfg.frame_len]
                .iter()
                .map(|&s| s as f64 / 32768.0)
                .collect()
        })
        .collect();
    Ok(frames)
}
