use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{DspError, FrameConfig, Result};

/// Symmetric Hamming window of length `n`.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Reusable one-sided power spectrum computation for a fixed frame layout.
#[derive(Clone)]
pub struct SpectrumAnalyzer {
    cfg: FrameConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectrumAnalyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectrumAnalyzer").field("cfg", &self.cfg).finish()
    }
}

impl SpectrumAnalyzer {
    pub fn new(cfg: &FrameConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self { cfg: *cfg, window: hamming(cfg.frame_len), fft })
    }

    pub fn config(&self) -> &FrameConfig {
        &self.cfg
    }

    /// `|FFT(window * zero_padded(frame))[k]|^2` for `k = 0..=fft_size/2`.
    pub fn power(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != self.cfg.frame_len {
            return Err(DspError::LengthMismatch { expected: self.cfg.frame_len, got: frame.len() });
        }
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
            b.re = x * w;
        }
        self.fft.process(&mut buf);
        Ok(buf[..self.cfg.num_bins()].iter().map(|c| c.norm_sqr()).collect())
    }
}

/// One-off power spectrum; prefer [`SpectrumAnalyzer`] in loops.
pub fn power_spectrum(frame: &[f64], cfg: &FrameConfig) -> Result<Vec<f64>> {
    SpectrumAnalyzer::new(cfg)?.power(frame)
}
