//! Deterministic parametric generator for the five sound classes.
//!
//! Each recipe draws its parameters from a ChaCha RNG seeded by
//! `(label, seed)`, renders one second at 16 kHz, normalizes the peak to a
//! random level in `[0.3, 0.85]` of full scale and adds a faint noise floor.
//! Breathing and muffled speech both concentrate energy between 2 and 3 kHz;
//! muffled speech with weak voicing is deliberately hard to tell apart from
//! breathing.

mod dataset;
mod filters;
mod wav;

pub use dataset::{
    clip_seed, generate_dataset, generate_dataset_with_plan, DatasetError, DatasetManifest, DatasetPlan, ManifestEntry,
    Split, DEFAULT_TRAIN_FRACTION, MANIFEST_FILE,
};
pub use wav::{read_wav, read_wav_with, write_wav, WavError};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dsp::{AudioClip, DEFAULT_SAMPLE_RATE};
use crate::labels::Label;
use filters::{pink_noise, white_noise, Biquad};

const N: usize = DEFAULT_SAMPLE_RATE as usize;
const RATE: f64 = DEFAULT_SAMPLE_RATE as f64;
/// Peak amplitude ceiling as a fraction of full scale.
pub const MAX_PEAK: f64 = 0.9;

/// Mixes a seed with a stream id (splitmix64 finalizer).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(label: Option<Label>, seed: u64) -> ChaCha8Rng {
    let stream = label.map_or(0, |l| l.index() as u64 + 1);
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

/// Hann-shaped envelope over `[start, start + len)`, zero elsewhere.
fn add_burst(out: &mut [f64], src: &[f64], start: usize, len: usize, attack: f64) {
    let len = len.min(out.len().saturating_sub(start));
    let rise = ((len as f64 * attack) as usize).max(1);
    for i in 0..len {
        let env = if i < rise {
            (0.5 - 0.5 * (PI * i as f64 / rise as f64).cos()).sqrt()
        } else {
            0.5 + 0.5 * (PI * (i - rise) as f64 / (len - rise).max(1) as f64).cos()
        };
        out[start + i] += env * src[(start + i) % src.len()];
    }
}

fn harmonic_burst<R: Rng>(
    rng: &mut R,
    len: usize,
    f0_start: f64,
    f0_end: f64,
    max_hz: f64,
    gain_at: impl Fn(f64) -> f64,
) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let max_k = (max_hz / f0_start.min(f0_end)).floor() as usize;
    for k in 1..=max_k {
        let phase0 = rng.gen_range(0.0..2.0 * PI);
        let mut phase = phase0;
        for (i, o) in out.iter_mut().enumerate() {
            let f0 = f0_start + (f0_end - f0_start) * i as f64 / len as f64;
            let f = k as f64 * f0;
            if f < max_hz {
                *o += gain_at(f) * phase.sin();
            }
            phase += 2.0 * PI * f / RATE;
        }
    }
    out
}

/// Pink noise band-limited to 300-3000 Hz plus a resonance at `fc`.
fn breath_noise<R: Rng>(rng: &mut R, fc: f64) -> Vec<f64> {
    let mut src = pink_noise(rng, N);
    Biquad::highpass(300.0, 0.707).run(&mut src);
    Biquad::lowpass(3000.0, 0.707).run(&mut src);
    let mut band = white_noise(rng, N);
    Biquad::bandpass(fc, rng.gen_range(1.5..3.0)).run(&mut band);
    let band_gain = rng.gen_range(1.5..3.0) * rms(&src) / rms(&band).max(1e-12);
    src.iter().zip(&band).map(|(a, b)| a + band_gain * b).collect()
}

fn breathes<R: Rng>(rng: &mut R) -> Vec<f64> {
    let fc = rng.gen_range(2000.0..3000.0);
    let mix = breath_noise(rng, fc);
    let mut out = vec![0.0; N];
    let breaths = rng.gen_range(1..=3);
    let slot = N / breaths;
    for b in 0..breaths {
        let len = rng.gen_range(0.3..0.65) * RATE;
        let len = (len as usize).min(slot);
        let start = b * slot + rng.gen_range(0..=slot - len);
        add_burst(&mut out, &mix, start, len, rng.gen_range(0.3..0.6));
    }
    out
}

fn cough<R: Rng>(rng: &mut R) -> Vec<f64> {
    let mut src = white_noise(rng, N);
    Biquad::highpass(200.0, 0.707).run(&mut src);
    Biquad::lowpass(rng.gen_range(4000.0..6500.0), 0.707).run(&mut src);
    let mut out = vec![0.0; N];
    let coughs = rng.gen_range(1..=2);
    let mut start = rng.gen_range(0.05..0.4) * RATE;
    for _ in 0..coughs {
        let len = (rng.gen_range(0.06..0.1) * RATE) as usize;
        let tau = rng.gen_range(0.015..0.035) * RATE;
        let s = start as usize;
        for i in 0..len.min(N - s) {
            let attack = (i as f64 / 32.0).min(1.0);
            out[s + i] += attack * (-(i as f64) / tau).exp() * src[s + i];
        }
        start += rng.gen_range(0.2..0.35) * RATE;
        if start as usize + len >= N {
            break;
        }
    }
    out
}

fn hello_help<R: Rng>(rng: &mut R) -> Vec<f64> {
    let f0 = rng.gen_range(180.0..260.0);
    let f1 = rng.gen_range(500.0..800.0);
    let f2 = rng.gen_range(1100.0..1800.0);
    let gain = move |f: f64| {
        let g = |c: f64, s: f64| (-(f - c).powi(2) / (2.0 * s * s)).exp();
        (g(f1, 150.0) + 0.7 * g(f2, 200.0) + 0.15) / (f / 200.0).sqrt()
    };
    let hello_len = (rng.gen_range(0.3..0.45) * RATE) as usize;
    let help_len = (rng.gen_range(0.2..0.3) * RATE) as usize;
    let gap = (rng.gen_range(0.08..0.2) * RATE) as usize;
    let start = rng.gen_range(0..=N - hello_len - gap - help_len);

    let glide = f0 * rng.gen_range(0.8..0.95);
    let hello = harmonic_burst(rng, hello_len, f0, glide, 4000.0, gain);
    let help = harmonic_burst(rng, help_len, f0 * 1.1, f0 * 0.85, 4000.0, gain);
    let mut aspiration = white_noise(rng, N);
    Biquad::highpass(1500.0, 0.707).run(&mut aspiration);
    let asp_gain = 0.3 * rms(&hello) / rms(&aspiration).max(1e-12);

    let mut out = vec![0.0; N];
    let h_len = (0.03 * RATE) as usize;
    let scaled: Vec<f64> = aspiration.iter().map(|v| v * asp_gain).collect();
    add_burst(&mut out, &scaled, start, h_len, 0.5);
    let mut tmp = vec![0.0; N];
    tmp[start..start + hello_len].copy_from_slice(&hello);
    add_burst(&mut out, &tmp, start, hello_len, 0.15);
    let s2 = start + hello_len + gap;
    add_burst(&mut out, &scaled, s2, h_len, 0.5);
    let mut tmp = vec![0.0; N];
    tmp[s2..s2 + help_len].copy_from_slice(&help);
    add_burst(&mut out, &tmp, s2, help_len, 0.1);
    out
}

fn muffled_words<R: Rng>(rng: &mut R) -> Vec<f64> {
    let fc = rng.gen_range(2200.0..2800.0);
    let voicing: f64 = rng.gen_range(0.0..1.0);
    let gain = move |f: f64| (-(f - fc).powi(2) / (2.0 * 350.0f64.powi(2))).exp() + 0.12;
    let breath = breath_noise(rng, fc);

    let mut out = vec![0.0; N];
    let syllables = rng.gen_range(1..=3);
    let mut t = (rng.gen_range(0.02..0.2) * RATE) as usize;
    for _ in 0..syllables {
        let len = (rng.gen_range(0.2..0.45) * RATE) as usize;
        if t + len >= N {
            break;
        }
        let f0 = rng.gen_range(100.0..170.0);
        let glide = f0 * rng.gen_range(0.85..1.1);
        let voiced = harmonic_burst(rng, len, f0, glide, 3000.0, gain);
        let noise_gain = rms(&voiced) / rms(&breath[t..t + len]).max(1e-12);
        let mut syl = vec![0.0; N];
        for i in 0..len {
            syl[t + i] = voicing * voiced[i] + (1.0 - voicing) * noise_gain * breath[t + i];
        }
        add_burst(&mut out, &syl, t, len, rng.gen_range(0.2..0.5));
        t += len + (rng.gen_range(0.05..0.2) * RATE) as usize;
    }
    out
}

fn noise<R: Rng>(rng: &mut R) -> Vec<f64> {
    let white = white_noise(rng, N);
    let pink = pink_noise(rng, N);
    let m = rng.gen_range(0.0..0.5);
    let (rw, rp) = (rms(&white), rms(&pink).max(1e-12));
    white.iter().zip(&pink).map(|(w, p)| (1.0 - m) * w / rw + m * p / rp).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Scales to the requested peak, adds the noise floor and quantizes.
fn finish<R: Rng>(rng: &mut R, mut x: Vec<f64>, peak: f64) -> Vec<i16> {
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / max);
    }
    let floor = Normal::new(0.0, rng.gen_range(0.0005..0.002)).expect("valid sigma");
    for v in x.iter_mut() {
        *v += floor.sample(rng);
    }
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > MAX_PEAK {
        x.iter_mut().for_each(|v| *v *= MAX_PEAK / max);
    }
    x.iter().map(|v| (v * 32767.0).round() as i16).collect()
}

/// One second of synthetic audio for `label`, identical for identical
/// `(label, seed)`.
pub fn generate_clip(label: Label, seed: u64) -> AudioClip {
    let mut rng = rng_for(Some(label), seed);
    let peak = rng.gen_range(0.3..0.85);
    let raw = match label {
        Label::Breathes => breathes(&mut rng),
        Label::Cough => cough(&mut rng),
        Label::HelloHelp => hello_help(&mut rng),
        Label::MuffledWords => muffled_words(&mut rng),
        Label::Noise => noise(&mut rng),
    };
    AudioClip::new(finish(&mut rng, raw, peak), DEFAULT_SAMPLE_RATE).with_label(label)
}

/// A quiet cell: only the noise floor.
pub fn generate_silence(seed: u64) -> AudioClip {
    let mut rng = rng_for(None, seed);
    AudioClip::new(finish(&mut rng, vec![0.0; N], 0.0), DEFAULT_SAMPLE_RATE)
}

/// Generates a clip for a label name, rejecting names outside the class set.
pub fn generate_named(label: &str, seed: u64) -> Result<AudioClip, crate::labels::UnknownLabel> {
    Ok(generate_clip(label.parse()?, seed))
}
