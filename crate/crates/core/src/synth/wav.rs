//! 16-bit PCM WAV reading and writing.

use std::path::Path;

use crate::dsp::{AudioClip, DEFAULT_SAMPLE_RATE};

#[derive(Debug, thiserror::Error)]
pub enum WavError {
    #[error("wav: {0}")]
    Format(#[from] hound::Error),
    #[error("expected 1 channel, file has {0}")]
    Channels(u16),
    #[error("expected {expected} Hz, file is {got} Hz")]
    SampleRate { expected: u32, got: u32 },
    #[error("expected 16-bit integer PCM, file is {0}")]
    SampleFormat(String),
}

fn spec_for(rate: u32) -> hound::WavSpec {
    hound::WavSpec { channels: 1, sample_rate: rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int }
}

pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<(), WavError> {
    let mut w = hound::WavWriter::create(path, spec_for(clip.sample_rate_hz))?;
    {
        let mut s = w.get_i16_writer(clip.samples.len() as u32);
        for &v in &clip.samples {
            s.write_sample(v);
        }
        s.flush()?;
    }
    w.finalize()?;
    Ok(())
}

/// Strict read: mono, 16-bit, 16 kHz.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip, WavError> {
    read_wav_with(path, Some(DEFAULT_SAMPLE_RATE))
}

/// Reads a mono 16-bit file; `expected_rate` of `None` accepts any rate.
pub fn read_wav_with(path: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<AudioClip, WavError> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(WavError::Channels(spec.channels));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(WavError::SampleFormat(format!("{}-bit {:?}", spec.bits_per_sample, spec.sample_format)));
    }
    if let Some(expected) = expected_rate {
        if spec.sample_rate != expected {
            return Err(WavError::SampleRate { expected, got: spec.sample_rate });
        }
    }
    let samples = r.samples::<i16>().collect::<Result<Vec<_>, _>>()?;
    Ok(AudioClip::new(samples, spec.sample_rate))
}
