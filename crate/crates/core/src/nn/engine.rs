use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, Layer, ModelSpec, NnError, Result, Shape, Weights};
use crate::dsp::FeatureMatrix;
use crate::labels::{Decision, Label};

/// One training example: a feature matrix and its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: FeatureMatrix,
    pub label: usize,
}

pub type Gradients = Weights;

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Per-layer state kept for the backward pass.
enum Aux {
    None,
    PoolArgmax(Vec<usize>),
    DropMask(Vec<f64>),
}

struct Trace {
    /// `acts[i]` is the input of layer `i`; the last entry holds the logits
    /// (the softmax is folded into the loss).
    acts: Vec<Vec<f64>>,
    aux: Vec<Aux>,
}

fn check_input(spec: &ModelSpec, features: &FeatureMatrix) -> Result<()> {
    if features.shape() != spec.input_shape {
        return Err(NnError::ShapeMismatch {
            expected: format!("{}x{}", spec.input_shape.0, spec.input_shape.1),
            got: format!("{}x{}", features.rows, features.cols),
        });
    }
    Ok(())
}

fn run<R: Rng + ?Sized>(
    spec: &ModelSpec,
    shapes: &[Shape],
    weights: &Weights,
    input: &[f64],
    mut dropout_rng: Option<&mut R>,
) -> Trace {
    let mut acts = Vec::with_capacity(spec.layers.len() + 1);
    let mut aux = Vec::with_capacity(spec.layers.len());
    acts.push(input.to_vec());
    for (i, layer) in spec.layers.iter().enumerate() {
        let x = &acts[i];
        let params = &weights.layers[i];
        let (out, a) = match (*layer, shapes[i], shapes[i + 1]) {
            (Layer::Conv1d { kernel, activation, .. }, Shape::Seq { channels, .. }, Shape::Seq { len, channels: filters }) => {
                let mut out = vec![0.0; len * filters];
                let span = kernel * channels;
                for t in 0..len {
                    // input rows t..t+kernel are contiguous in row-major layout
                    let window = &x[t * channels..t * channels + span];
                    for f in 0..filters {
                        let w = &params.weights[f * span..(f + 1) * span];
                        let z = params.bias[f] + w.iter().zip(window).map(|(a, b)| a * b).sum::<f64>();
                        out[t * filters + f] = activation.apply(z);
                    }
                }
                (out, Aux::None)
            }
            (Layer::MaxPool1d { size }, Shape::Seq { channels, .. }, Shape::Seq { len, .. }) => {
                let mut out = vec![0.0; len * channels];
                let mut arg = vec![0; len * channels];
                for t in 0..len {
                    for c in 0..channels {
                        let mut best = t * size * channels + c;
                        for s in 1..size {
                            let idx = (t * size + s) * channels + c;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                        out[t * channels + c] = x[best];
                        arg[t * channels + c] = best;
                    }
                }
                (out, Aux::PoolArgmax(arg))
            }
            (Layer::Flatten, _, _) => (x.clone(), Aux::None),
            (Layer::Dense { units, activation }, _, _) => {
                let n = x.len();
                let out = (0..units)
                    .map(|u| {
                        let w = &params.weights[u * n..(u + 1) * n];
                        activation.apply(params.bias[u] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                    })
                    .collect();
                (out, Aux::None)
            }
            (Layer::Dropout { rate }, _, _) => match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..x.len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
                    (x.iter().zip(&mask).map(|(a, m)| a * m).collect(), Aux::DropMask(mask))
                }
                _ => (x.clone(), Aux::None),
            },
            (Layer::Softmax, _, _) => break,
            _ => unreachable!("shapes validated"),
        };
        acts.push(out);
        aux.push(a);
    }
    Trace { acts, aux }
}

fn prepare<'a>(spec: &ModelSpec, weights: &Weights, features: &'a FeatureMatrix) -> Result<(Vec<Shape>, &'a [f64])> {
    let shapes = spec.shapes()?;
    weights.check(spec)?;
    check_input(spec, features)?;
    Ok((shapes, &features.values))
}

/// Inference-mode forward pass returning class probabilities.
pub fn forward(spec: &ModelSpec, weights: &Weights, features: &FeatureMatrix) -> Result<Vec<f64>> {
    let (shapes, input) = prepare(spec, weights, features)?;
    let trace = run::<rand_chacha::ChaCha8Rng>(spec, &shapes, weights, input, None);
    Ok(softmax(trace.acts.last().expect("logits")))
}

/// Index of the most probable class (first on ties) if it reaches `threshold`.
pub fn classify_index(probabilities: &[f64], threshold: f64) -> Option<usize> {
    let (best, p) = probabilities
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
    (p >= threshold).then_some(best)
}

pub fn classify(probabilities: &[f64], threshold: f64) -> Decision {
    classify_index(probabilities, threshold)
        .and_then(Label::from_index)
        .map_or(Decision::Uncertain, Decision::Class)
}

/// Class probabilities together with the thresholded decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub decision: Decision,
    pub threshold: f64,
}

impl Prediction {
    pub fn new(probabilities: Vec<f64>, threshold: f64) -> Self {
        let decision = classify(&probabilities, threshold);
        Self { probabilities, decision, threshold }
    }
}

/// Loss and parameter gradients for a single example, optionally with
/// dropout masks drawn from `rng`.
pub(crate) fn example_gradients<R: Rng + ?Sized>(
    spec: &ModelSpec,
    shapes: &[Shape],
    weights: &Weights,
    example: &Example,
    rng: Option<&mut R>,
) -> (f64, bool, Gradients) {
    let trace = run(spec, shapes, weights, &example.features.values, rng);
    let logits = trace.acts.last().expect("logits");
    let loss = log_sum_exp(logits) - logits[example.label];
    let probs = softmax(logits);
    let correct = classify_index(&probs, 0.0) == Some(example.label);

    let mut grads = Weights {
        layers: weights
            .layers
            .iter()
            .map(|p| super::LayerParams { weights: vec![0.0; p.weights.len()], bias: vec![0.0; p.bias.len()] })
            .collect(),
    };
    // d(loss)/d(logits) = p - y
    let mut delta = probs;
    delta[example.label] -= 1.0;

    let last = spec.layers.len() - 1; // softmax
    for i in (0..last).rev() {
        let x = &trace.acts[i];
        let y = &trace.acts[i + 1];
        let params = &weights.layers[i];
        let g = &mut grads.layers[i];
        delta = match (spec.layers[i], shapes[i], shapes[i + 1], &trace.aux[i]) {
            (
                Layer::Conv1d { kernel, activation, .. },
                Shape::Seq { channels, .. },
                Shape::Seq { len, channels: filters },
                _,
            ) => {
                if activation == Activation::Relu {
                    delta.iter_mut().zip(y).for_each(|(d, &o)| if o <= 0.0 { *d = 0.0 });
                }
                let span = kernel * channels;
                let mut dx = vec![0.0; x.len()];
                for t in 0..len {
                    let window = &x[t * channels..t * channels + span];
                    let dwin = &mut dx[t * channels..t * channels + span];
                    for f in 0..filters {
                        let d = delta[t * filters + f];
                        if d == 0.0 {
                            continue;
                        }
                        g.bias[f] += d;
                        let w = &params.weights[f * span..(f + 1) * span];
                        let gw = &mut g.weights[f * span..(f + 1) * span];
                        for j in 0..span {
                            gw[j] += d * window[j];
                            dwin[j] += d * w[j];
                        }
                    }
                }
                dx
            }
            (Layer::MaxPool1d { .. }, _, _, Aux::PoolArgmax(arg)) => {
                let mut dx = vec![0.0; x.len()];
                for (d, &src) in delta.iter().zip(arg) {
                    dx[src] += d;
                }
                dx
            }
            (Layer::Flatten, ..) => delta,
            (Layer::Dense { units, activation }, ..) => {
                if activation == Activation::Relu {
                    delta.iter_mut().zip(y).for_each(|(d, &o)| if o <= 0.0 { *d = 0.0 });
                }
                let n = x.len();
                let mut dx = vec![0.0; n];
                for u in 0..units {
                    let d = delta[u];
                    g.bias[u] += d;
                    let w = &params.weights[u * n..(u + 1) * n];
                    let gw = &mut g.weights[u * n..(u + 1) * n];
                    for j in 0..n {
                        gw[j] += d * x[j];
                        dx[j] += d * w[j];
                    }
                }
                dx
            }
            (Layer::Dropout { .. }, _, _, Aux::DropMask(mask)) => delta.iter().zip(mask).map(|(d, m)| d * m).collect(),
            (Layer::Dropout { .. }, ..) => delta,
            _ => unreachable!("shapes validated"),
        };
    }
    (loss, correct, grads)
}

pub(crate) fn accumulate(into: &mut Gradients, from: &Gradients) {
    for (a, b) in into.iter_mut().zip(from.iter()) {
        *a += b;
    }
}

/// Mean categorical cross-entropy over `batch` and its exact gradient with
/// respect to every parameter. Dropout is inactive.
pub fn gradients(spec: &ModelSpec, weights: &Weights, batch: &[Example]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let shapes = spec.shapes()?;
    weights.check(spec)?;
    let outputs = shapes.last().map(|s| s.size()).unwrap_or(0);
    let mut total = Weights::zeros(spec)?;
    let mut loss = 0.0;
    for ex in batch {
        check_input(spec, &ex.features)?;
        if ex.label >= outputs {
            return Err(NnError::LabelOutOfRange { label: ex.label, num_outputs: outputs });
        }
        let (l, _, g) = example_gradients::<rand_chacha::ChaCha8Rng>(spec, &shapes, weights, ex, None);
        loss += l;
        accumulate(&mut total, &g);
    }
    let n = batch.len() as f64;
    total.iter_mut().for_each(|v| *v /= n);
    Ok((loss / n, total))
}

/// Mean loss without gradients.
pub(crate) fn loss_and_correct(spec: &ModelSpec, shapes: &[Shape], weights: &Weights, ex: &Example) -> (f64, bool) {
    let trace = run::<rand_chacha::ChaCha8Rng>(spec, shapes, weights, &ex.features.values, None);
    let logits = trace.acts.last().expect("logits");
    let probs = softmax(logits);
    (log_sum_exp(logits) - logits[ex.label], classify_index(&probs, 0.0) == Some(ex.label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_2x2() -> (ModelSpec, Weights) {
        let spec = ModelSpec::new(
            (1, 2),
            vec![Layer::Flatten, Layer::Dense { units: 2, activation: Activation::Linear }, Layer::Softmax],
        );
        let w = Weights {
            layers: vec![
                LayerParams::default(),
                LayerParams { weights: vec![0.5, -1.0, 2.0, 0.25], bias: vec![0.1, -0.2] },
                LayerParams::default(),
            ],
        };
        (spec, w)
    }

    #[test]
    fn zero_head_gives_uniform() {
        let spec = ModelSpec::default_audio((61, 40));
        let mut w = Weights::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let head = spec.layers.len() - 2;
        w.layers[head].weights.iter_mut().for_each(|v| *v = 0.0);
        let x = FeatureMatrix::new(61, 40, (0..2440).map(|i| (i as f64 * 0.37).sin()).collect());
        let p = forward(&spec, &w, &x).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert_eq!(classify(&p, 0.6), Decision::Uncertain);
    }

    #[test]
    fn dense_matches_hand_computation() {
        let (spec, w) = dense_2x2();
        let x = FeatureMatrix::new(1, 2, vec![1.0, -1.0]);
        // z0 = 0.1 + 0.5*1 + (-1.0)*(-1) = 1.6
        // z1 = -0.2 + 2.0*1 + 0.25*(-1) = 1.55
        let (z0, z1) = (1.6f64, 1.55f64);
        let e = (z0.exp(), z1.exp());
        let p = forward(&spec, &w, &x).unwrap();
        assert!((p[0] - e.0 / (e.0 + e.1)).abs() < 1e-12);
        assert!((p[1] - e.1 / (e.0 + e.1)).abs() < 1e-12);
    }

    #[test]
    fn identity_convolution() {
        let spec = ModelSpec::new(
            (6, 1),
            vec![
                Layer::Conv1d { filters: 1, kernel: 1, activation: Activation::Linear },
                Layer::Flatten,
                Layer::Softmax,
            ],
        );
        let w = Weights {
            layers: vec![LayerParams { weights: vec![1.0], bias: vec![0.0] }, LayerParams::default(), LayerParams::default()],
        };
        let values = vec![0.5, -1.0, 2.0, 0.0, 3.0, -2.5];
        let x = FeatureMatrix::new(6, 1, values.clone());
        let shapes = spec.shapes().unwrap();
        let trace = run::<ChaCha8Rng>(&spec, &shapes, &w, &x.values, None);
        assert_eq!(trace.acts[1], values);
        assert_eq!(forward(&spec, &w, &x).unwrap(), softmax(&values));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (spec, w) = dense_2x2();
        let x = FeatureMatrix::new(1, 3, vec![0.0; 3]);
        assert!(matches!(forward(&spec, &w, &x), Err(NnError::ShapeMismatch { .. })));
    }

    #[test]
    fn classify_rules() {
        assert_eq!(classify(&[0.00, 0.07, 0.07, 0.65, 0.21], 0.6), Decision::Class(Label::MuffledWords));
        assert_eq!(classify(&[0.2; 5], 0.6), Decision::Uncertain);
        assert_eq!(classify(&[0.60, 0.40, 0.0, 0.0, 0.0], 0.6), Decision::Class(Label::Breathes));
        assert_eq!(classify_index(&[0.5, 0.5], 0.5), Some(0));
    }

    #[test]
    fn confident_correct_prediction_has_zero_loss() {
        let (spec, mut w) = dense_2x2();
        w.layers[1] = LayerParams { weights: vec![0.0; 4], bias: vec![1000.0, 0.0] };
        let ex = Example { features: FeatureMatrix::new(1, 2, vec![0.0, 0.0]), label: 0 };
        let (loss, _) = gradients(&spec, &w, &[ex]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn output_gradient_is_p_minus_y() {
        // zero weights: logits are the biases, equal biases give p = (0.5, 0.5)
        let (spec, mut w) = dense_2x2();
        w.layers[1] = LayerParams { weights: vec![0.0; 4], bias: vec![0.3, 0.3] };
        let ex = Example { features: FeatureMatrix::new(1, 2, vec![1.0, 2.0]), label: 0 };
        let (_, g) = gradients(&spec, &w, &[ex]).unwrap();
        assert!((g.layers[1].bias[0] + 0.5).abs() < 1e-15);
        assert!((g.layers[1].bias[1] - 0.5).abs() < 1e-15);
        // dW[u][i] = (p - y)[u] * x[i]
        assert_eq!(g.layers[1].weights, vec![-0.5, -1.0, 0.5, 1.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let n = rng.gen_range(2..10);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let p = softmax(&logits);
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
