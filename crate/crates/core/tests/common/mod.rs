//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rubble_core::dsp::{AudioClip, FeatureMatrix};
use rubble_core::nn::{forward, Activation, Example, Layer, ModelSpec, Weights};
use rubble_core::tuner::{CostEstimate, DeviceBudget};

/// A small random stack (convolutions, optional pooling, dense head) with
/// random weights and a three-example batch.
pub fn random_model(seed: u64) -> (ModelSpec, Weights, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { Activation::Relu } else { Activation::Linear };
    let (mut len, channels) = (rng.gen_range(6..11usize), rng.gen_range(1..4usize));
    let input = (len, channels);
    let mut layers = Vec::new();
    for _ in 0..rng.gen_range(0..3) {
        let kernel = rng.gen_range(1..4usize).min(len);
        layers.push(Layer::Conv1d { filters: rng.gen_range(1..4), kernel, activation: act(&mut rng) });
        len = len - kernel + 1;
        if len >= 4 && rng.gen_bool(0.5) {
            layers.push(Layer::MaxPool1d { size: 2 });
            len /= 2;
        }
    }
    layers.push(Layer::Flatten);
    if rng.gen_bool(0.3) {
        layers.push(Layer::Dropout { rate: 0.25 });
    }
    if rng.gen_bool(0.6) {
        layers.push(Layer::Dense { units: rng.gen_range(2..7), activation: act(&mut rng) });
    }
    let outputs = rng.gen_range(2..6usize);
    layers.push(Layer::Dense { units: outputs, activation: Activation::Linear });
    layers.push(Layer::Softmax);
    let spec = ModelSpec::new(input, layers);
    let mut weights = Weights::init(&spec, &mut rng).expect("valid random spec");
    for layer in &mut weights.layers {
        layer.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
    }
    let batch = (0..3)
        .map(|_| Example {
            features: FeatureMatrix::new(input.0, input.1, (0..input.0 * input.1).map(|_| rng.gen_range(-1.5..1.5)).collect()),
            label: rng.gen_range(0..outputs),
        })
        .collect();
    (spec, weights, batch)
}

/// Mean cross-entropy computed from the forward pass only.
pub fn mean_cross_entropy(spec: &ModelSpec, weights: &Weights, batch: &[Example]) -> f64 {
    batch.iter().map(|ex| -forward(spec, weights, &ex.features).unwrap()[ex.label].ln()).sum::<f64>() / batch.len() as f64
}

/// Central differences over every parameter.
pub fn numeric_gradient(spec: &ModelSpec, weights: &Weights, batch: &[Example], h: f64) -> Vec<f64> {
    let mut w = weights.clone();
    let n = w.param_count();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = *w.iter().nth(i).unwrap();
        *w.iter_mut().nth(i).unwrap() = orig + h;
        let up = mean_cross_entropy(spec, &w, batch);
        *w.iter_mut().nth(i).unwrap() = orig - h;
        let down = mean_cross_entropy(spec, &w, batch);
        *w.iter_mut().nth(i).unwrap() = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// `||a - n|| / max(||a||, ||n||)` over the whole gradient vector.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Largest per-parameter relative error among parameters whose gradient
/// magnitude exceeds `floor`.
pub fn max_elementwise_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| a.abs().max(n.abs()) > floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

/// Textbook scalar Adam.
pub struct ScalarAdam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub m: f64,
    pub v: f64,
    pub t: i32,
}

impl ScalarAdam {
    pub fn new(lr: f64) -> Self {
        Self { lr, b1: 0.9, b2: 0.999, eps: 1e-8, m: 0.0, v: 0.0, t: 0 }
    }

    pub fn step(&mut self, w: f64, g: f64) -> f64 {
        self.t += 1;
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
        let m_hat = self.m / (1.0 - self.b1.powi(self.t));
        let v_hat = self.v / (1.0 - self.b2.powi(self.t));
        w - self.lr * m_hat / (v_hat.sqrt() + self.eps)
    }
}

/// `sum_k |X[k]|^2` over all `n` bins of a direct DFT of `x` zero-padded to `n`.
pub fn naive_dft_energy(x: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let a = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            re * re + im * im
        })
        .sum()
}

/// One candidate as seen by an exhaustive search.
#[derive(Debug, Clone)]
pub struct Scored {
    pub id: String,
    pub accuracy: f64,
    pub cost: CostEstimate,
}

/// Best feasible candidate: highest accuracy, then lowest latency, then
/// lowest RAM, then smallest id.
pub fn brute_force_best<'a>(scored: &'a [Scored], budget: &DeviceBudget) -> Option<&'a Scored> {
    let fits = |c: &CostEstimate| c.ram_bytes <= budget.sram_bytes && c.rom_bytes <= budget.flash_bytes && c.latency_ms <= budget.latency_budget_ms;
    let mut best: Option<&Scored> = None;
    for s in scored.iter().filter(|s| fits(&s.cost)) {
        let better = match best {
            None => true,
            Some(b) => {
                if s.accuracy != b.accuracy {
                    s.accuracy > b.accuracy
                } else if s.cost.latency_ms != b.cost.latency_ms {
                    s.cost.latency_ms < b.cost.latency_ms
                } else if s.cost.ram_bytes != b.cost.ram_bytes {
                    s.cost.ram_bytes < b.cost.ram_bytes
                } else {
                    s.id < b.id
                }
            }
        };
        if better {
            best = Some(s);
        }
    }
    best
}

pub fn labeled(clips: Vec<(rubble_core::synth::Split, AudioClip)>, split: rubble_core::synth::Split) -> Vec<AudioClip> {
    clips.into_iter().filter(|(s, _)| *s == split).map(|(_, c)| c).collect()
}
