use super::{DspError, Result};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, centers equally spaced in mel.
///
/// Filter `m` rises from `edges_hz[m]` to its center `edges_hz[m + 1]` and
/// falls to zero at `edges_hz[m + 2]`. Neighbouring triangles are
/// complementary, so between the first and last centers every FFT bin's
/// column sum is exactly one.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub sample_rate_hz: u32,
    pub fft_size: usize,
    pub num_filters: usize,
    pub f_low_hz: f64,
    pub f_high_hz: f64,
    /// `num_filters + 2` band edges in Hz.
    pub edges_hz: Vec<f64>,
    /// `num_filters x (fft_size / 2 + 1)` non-negative weights.
    pub weights: Vec<Vec<f64>>,
    /// Half-open range of bins with non-zero weight, per filter.
    support: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn new(
        sample_rate_hz: u32,
        fft_size: usize,
        num_filters: usize,
        f_low_hz: f64,
        f_high_hz: f64,
    ) -> Result<Self> {
        let nyquist = sample_rate_hz as f64 / 2.0;
        if num_filters == 0 {
            return Err(DspError::InvalidBand("num_filters must be at least 1".into()));
        }
        if !(f_low_hz >= 0.0 && f_low_hz < f_high_hz && f_high_hz <= nyquist) {
            return Err(DspError::InvalidBand(format!(
                "need 0 <= f_low ({f_low_hz}) < f_high ({f_high_hz}) <= {nyquist}"
            )));
        }
        if fft_size < 2 {
            return Err(DspError::InvalidBand(format!("fft_size {fft_size} too small")));
        }

        let mel_lo = hz_to_mel(f_low_hz);
        let mel_hi = hz_to_mel(f_high_hz);
        let step = (mel_hi - mel_lo) / (num_filters + 1) as f64;
        let mut edges_hz: Vec<f64> =
            (0..num_filters + 2).map(|i| mel_to_hz(mel_lo + step * i as f64)).collect();
        // pin the outer edges against round-off in the mel round trip
        edges_hz[0] = f_low_hz;
        edges_hz[num_filters + 1] = f_high_hz;

        let num_bins = fft_size / 2 + 1;
        let bin_hz = sample_rate_hz as f64 / fft_size as f64;
        let mut weights = vec![vec![0.0; num_bins]; num_filters];
        let mut support = Vec::with_capacity(num_filters);
        for (m, row) in weights.iter_mut().enumerate() {
            let (lo, c, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            let mut first = num_bins;
            let mut last = 0;
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                let v = if f > lo && f <= c {
                    (f - lo) / (c - lo)
                } else if f > c && f < hi {
                    (hi - f) / (hi - c)
                } else {
                    0.0
                };
                if v > 0.0 {
                    *w = v;
                    first = first.min(k);
                    last = k + 1;
                }
            }
            if first >= last {
                return Err(DspError::InvalidBand(format!(
                    "filter {m} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; use fewer filters or a larger FFT"
                )));
            }
            support.push((first, last));
        }

        Ok(Self { sample_rate_hz, fft_size, num_filters, f_low_hz, f_high_hz, edges_hz, weights, support })
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..self.num_filters + 1]
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Filter energies for one power spectrum.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.support)
            .map(|(row, &(a, b))| row[a..b].iter().zip(&power[a..b]).map(|(w, p)| w * p).sum())
            .collect()
    }
}
