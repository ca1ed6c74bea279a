use serde::{Deserialize, Serialize};

use super::{
    frame_signal, AudioClip, DspError, FrameConfig, MelFilterbank, Result, SpectrumAnalyzer,
    DEFAULT_SAMPLE_RATE, LOG_FLOOR,
};

/// Row-major `rows x cols` matrix of features (frames x coefficients).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "feature matrix size");
        Self { rows, cols, values }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Mean over frames for each column.
    pub fn column_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.rows.max(1) as f64);
        out
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

fn check_rate(clip: &AudioClip, bank: &MelFilterbank) -> Result<()> {
    if clip.sample_rate_hz != bank.sample_rate_hz {
        return Err(DspError::SampleRateMismatch { expected: bank.sample_rate_hz, got: clip.sample_rate_hz });
    }
    Ok(())
}

fn mfe_with(clip: &AudioClip, analyzer: &SpectrumAnalyzer, bank: &MelFilterbank) -> Result<FeatureMatrix> {
    check_rate(clip, bank)?;
    let cfg = analyzer.config();
    if bank.fft_size != cfg.fft_size {
        return Err(DspError::LengthMismatch { expected: cfg.fft_size, got: bank.fft_size });
    }
    let frames = frame_signal(clip, cfg)?;
    let mut values = Vec::with_capacity(frames.len() * bank.num_filters);
    for frame in &frames {
        let power = analyzer.power(frame)?;
        values.extend(bank.apply(&power).into_iter().map(|e| e.max(LOG_FLOOR).log10()));
    }
    Ok(FeatureMatrix::new(frames.len(), bank.num_filters, values))
}

/// Log10 Mel filterbank energies, one row per frame.
pub fn mfe(clip: &AudioClip, cfg: &FrameConfig, bank: &MelFilterbank) -> Result<FeatureMatrix> {
    mfe_with(clip, &SpectrumAnalyzer::new(cfg)?, bank)
}

/// Orthonormal DCT-II basis, `num_out x num_in`, row `k` scaled by
/// `sqrt(1/N)` for `k = 0` and `sqrt(2/N)` otherwise.
pub fn dct_matrix(num_out: usize, num_in: usize) -> Vec<Vec<f64>> {
    let n = num_in as f64;
    (0..num_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            (0..num_in)
                .map(|i| {
                    scale * (std::f64::consts::PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos()
                })
                .collect()
        })
        .collect()
}

/// Applies a DCT to each MFE row, keeping `num_coeffs` coefficients.
pub fn mfcc_from_mfe(energies: &FeatureMatrix, num_coeffs: usize) -> Result<FeatureMatrix> {
    if num_coeffs > energies.cols {
        return Err(DspError::TooManyCoefficients { num_coeffs, num_filters: energies.cols });
    }
    let dct = dct_matrix(num_coeffs, energies.cols);
    Ok(apply_dct(energies, &dct, 0))
}

fn apply_dct(energies: &FeatureMatrix, dct: &[Vec<f64>], skip: usize) -> FeatureMatrix {
    let cols = dct.len() - skip;
    let mut values = Vec::with_capacity(energies.rows * cols);
    for r in 0..energies.rows {
        let row = energies.row(r);
        values.extend(dct[skip..].iter().map(|basis| basis.iter().zip(row).map(|(b, x)| b * x).sum::<f64>()));
    }
    FeatureMatrix::new(energies.rows, cols, values)
}

pub fn mfcc(clip: &AudioClip, cfg: &FrameConfig, bank: &MelFilterbank, num_coeffs: usize) -> Result<FeatureMatrix> {
    if num_coeffs > bank.num_filters {
        return Err(DspError::TooManyCoefficients { num_coeffs, num_filters: bank.num_filters });
    }
    mfcc_from_mfe(&mfe(clip, cfg, bank)?, num_coeffs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrontendKind {
    Mfe,
    /// With `drop_c0` the energy coefficient is removed, which makes the
    /// features exactly invariant to input gain.
    Mfcc { num_coeffs: usize, drop_c0: bool },
}

/// Complete feature-extraction configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontend {
    pub kind: FrontendKind,
    pub frame: FrameConfig,
    pub sample_rate_hz: u32,
    pub num_filters: usize,
    pub f_low_hz: f64,
    pub f_high_hz: f64,
}

impl Default for Frontend {
    fn default() -> Self {
        Self {
            kind: FrontendKind::Mfe,
            frame: FrameConfig::default(),
            sample_rate_hz: DEFAULT_SAMPLE_RATE,
            num_filters: 40,
            f_low_hz: 300.0,
            f_high_hz: 8000.0,
        }
    }
}

impl Frontend {
    pub fn mfcc(num_coeffs: usize, drop_c0: bool) -> Self {
        Self { kind: FrontendKind::Mfcc { num_coeffs, drop_c0 }, ..Default::default() }
    }

    pub fn num_features(&self) -> usize {
        match self.kind {
            FrontendKind::Mfe => self.num_filters,
            FrontendKind::Mfcc { num_coeffs, drop_c0 } => num_coeffs - usize::from(drop_c0),
        }
    }

    /// Feature matrix shape for a clip of `num_samples` samples.
    pub fn output_shape(&self, num_samples: usize) -> Option<(usize, usize)> {
        Some((self.frame.frame_count(num_samples)?, self.num_features()))
    }

    /// Shape for a one-second clip at the configured rate.
    pub fn clip_shape(&self) -> Option<(usize, usize)> {
        self.output_shape(self.sample_rate_hz as usize)
    }

    pub fn build(&self) -> Result<FeatureExtractor> {
        let analyzer = SpectrumAnalyzer::new(&self.frame)?;
        let bank =
            MelFilterbank::new(self.sample_rate_hz, self.frame.fft_size, self.num_filters, self.f_low_hz, self.f_high_hz)?;
        let dct = match self.kind {
            FrontendKind::Mfe => None,
            FrontendKind::Mfcc { num_coeffs, drop_c0 } => {
                if num_coeffs > self.num_filters {
                    return Err(DspError::TooManyCoefficients { num_coeffs, num_filters: self.num_filters });
                }
                if drop_c0 && num_coeffs < 2 {
                    return Err(DspError::TooManyCoefficients { num_coeffs: 0, num_filters: self.num_filters });
                }
                Some((dct_matrix(num_coeffs, self.num_filters), usize::from(drop_c0)))
            }
        };
        Ok(FeatureExtractor { frontend: self.clone(), analyzer, bank, dct })
    }
}

/// A [`Frontend`] with its FFT plan, filterbank and DCT basis precomputed.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    frontend: Frontend,
    analyzer: SpectrumAnalyzer,
    bank: MelFilterbank,
    dct: Option<(Vec<Vec<f64>>, usize)>,
}

impl FeatureExtractor {
    pub fn frontend(&self) -> &Frontend {
        &self.frontend
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        let energies = mfe_with(clip, &self.analyzer, &self.bank)?;
        Ok(match &self.dct {
            None => energies,
            Some((dct, skip)) => apply_dct(&energies, dct, *skip),
        })
    }
}
