//! RBJ biquads and noise sources used by the recipes.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const RATE: f64 = crate::dsp::DEFAULT_SAMPLE_RATE as f64;

pub struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn from_raw(b: [f64; 3], a: [f64; 3]) -> Self {
        Self { b: [b[0] / a[0], b[1] / a[0], b[2] / a[0]], a: [a[1] / a[0], a[2] / a[0]] }
    }

    pub fn lowpass(fc: f64, q: f64) -> Self {
        let w = 2.0 * PI * fc / RATE;
        let alpha = w.sin() / (2.0 * q);
        let c = w.cos();
        Self::from_raw([(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0], [1.0 + alpha, -2.0 * c, 1.0 - alpha])
    }

    pub fn highpass(fc: f64, q: f64) -> Self {
        let w = 2.0 * PI * fc / RATE;
        let alpha = w.sin() / (2.0 * q);
        let c = w.cos();
        Self::from_raw([(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0], [1.0 + alpha, -2.0 * c, 1.0 - alpha])
    }

    /// Constant 0 dB peak gain band-pass.
    pub fn bandpass(fc: f64, q: f64) -> Self {
        let w = 2.0 * PI * fc / RATE;
        let alpha = w.sin() / (2.0 * q);
        let c = w.cos();
        Self::from_raw([alpha, 0.0, -alpha], [1.0 + alpha, -2.0 * c, 1.0 - alpha])
    }

    /// Direct form I, in place.
    pub fn run(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let x0 = *v;
            let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *v = y0;
        }
    }
}

pub fn white_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Paul Kellet's economy pink filter over white noise.
pub fn pink_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect()
}
