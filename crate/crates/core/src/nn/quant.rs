//! Per-layer affine int8 post-training quantization.

use super::{LayerParams, Weights};

/// Smallest scale used when a layer's value range collapses to a point.
pub const SCALE_FLOOR: f32 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub scale: f32,
    pub zero_point: i8,
    pub weights: Vec<i8>,
    pub bias: Vec<i8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    pub layers: Vec<QuantizedLayer>,
}

fn quantize_layer(p: &LayerParams) -> QuantizedLayer {
    // the representable range always includes zero so that zero is exact
    let (lo, hi) = p.iter().fold((0.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let scale = (((hi - lo) / 255.0) as f32).max(SCALE_FLOOR);
    let zero_point = (-128.0 - lo / scale as f64).round().clamp(-128.0, 127.0) as i8;
    let q = |v: &f64| ((v / scale as f64).round() + zero_point as f64).clamp(-128.0, 127.0) as i8;
    QuantizedLayer { scale, zero_point, weights: p.weights.iter().map(q).collect(), bias: p.bias.iter().map(q).collect() }
}

pub fn quantize(weights: &Weights) -> QuantizedWeights {
    QuantizedWeights { layers: weights.layers.iter().map(quantize_layer).collect() }
}

impl QuantizedLayer {
    fn dequantize(&self) -> LayerParams {
        let d = |&q: &i8| (q as i32 - self.zero_point as i32) as f64 * self.scale as f64;
        LayerParams { weights: self.weights.iter().map(d).collect(), bias: self.bias.iter().map(d).collect() }
    }
}

impl QuantizedWeights {
    pub fn dequantize(&self) -> Weights {
        Weights { layers: self.layers.iter().map(QuantizedLayer::dequantize).collect() }
    }

    /// Bytes needed for the int8 values plus a scale and zero point per
    /// parameterized layer.
    pub fn payload_bytes(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| !l.weights.is_empty() || !l.bias.is_empty())
            .map(|l| l.weights.len() + l.bias.len() + 5)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;
    use rand::SeedableRng;

    #[test]
    fn all_zero_layer_round_trips() {
        let w = Weights { layers: vec![LayerParams { weights: vec![0.0; 16], bias: vec![0.0; 4] }] };
        let q = quantize(&w);
        assert_eq!(q.layers[0].scale, SCALE_FLOOR);
        assert_eq!(q.dequantize(), w);
    }

    #[test]
    fn error_within_half_step() {
        let spec = ModelSpec::default_audio((61, 40));
        let w = Weights::init(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3)).unwrap();
        let q = quantize(&w);
        let d = q.dequantize();
        for ((a, b), ql) in w.layers.iter().zip(&d.layers).zip(&q.layers) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= ql.scale as f64 * 0.5 + 1e-9);
            }
        }
    }

    #[test]
    fn int8_is_quarter_size() {
        let spec = ModelSpec::default_audio((61, 40));
        let w = Weights::init(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3)).unwrap();
        let q = quantize(&w);
        let float_bytes = 4 * w.param_count();
        let ratio = q.payload_bytes() as f64 / float_bytes as f64;
        assert!((ratio - 0.25).abs() < 0.01, "{ratio}");
    }
}
