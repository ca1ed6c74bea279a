use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::engine::{accumulate, example_gradients, loss_and_correct, Example};
use super::{ModelSpec, NnError, Result, Shape, Weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub validation_split: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.0005, epochs: 100, validation_split: 0.2, batch_size: 32, seed: 42 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_split > 0.0 && self.validation_split < 1.0) {
            return Err(NnError::InvalidConfig(format!("validation_split {} outside (0, 1)", self.validation_split)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(NnError::InvalidConfig(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: Weights,
    pub history: Vec<EpochStats>,
    /// Indices into the input dataset held out for validation.
    pub validation_indices: Vec<usize>,
}

/// Stratified split: every class contributes `round(n_c * split)` examples
/// (at least one when it has two or more) to validation.
fn split_indices(data: &[Example], outputs: usize, split: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..outputs {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == class).collect();
        idx.shuffle(rng);
        let mut n_val = (idx.len() as f64 * split).round() as usize;
        if idx.len() >= 2 {
            n_val = n_val.clamp(1, idx.len() - 1);
        } else {
            n_val = 0;
        }
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn evaluate(spec: &ModelSpec, shapes: &[Shape], weights: &Weights, data: &[Example], idx: &[usize]) -> (f64, f64) {
    if idx.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let (loss, correct) = idx.iter().fold((0.0, 0usize), |(l, c), &i| {
        let (li, ok) = loss_and_correct(spec, shapes, weights, &data[i]);
        (l + li, c + usize::from(ok))
    });
    (loss / idx.len() as f64, correct as f64 / idx.len() as f64)
}

/// Per-example gradients for a batch, summed in batch order.
fn batch_gradients(
    spec: &ModelSpec,
    shapes: &[Shape],
    weights: &Weights,
    batch: &[(&Example, u64)],
) -> Result<(f64, usize, Weights)> {
    let one = |&(ex, seed): &(&Example, u64)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        example_gradients(spec, shapes, weights, ex, Some(&mut rng))
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<_> = {
        use rayon::prelude::*;
        batch.par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<_> = batch.iter().map(one).collect();

    let mut total = Weights::zeros(spec)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (l, ok, g) in &parts {
        loss += l;
        correct += usize::from(*ok);
        accumulate(&mut total, g);
    }
    let n = batch.len() as f64;
    total.iter_mut().for_each(|v| *v /= n);
    Ok((loss, correct, total))
}

/// Trains `spec` on `data` with Adam and mini-batches. All randomness
/// (split, initialization, shuffling, dropout) derives from `cfg.seed`.
pub fn fit(spec: &ModelSpec, data: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let shapes = spec.shapes()?;
    let outputs = spec.num_outputs()?;
    for ex in data {
        if ex.features.shape() != spec.input_shape {
            return Err(NnError::ShapeMismatch {
                expected: format!("{:?}", spec.input_shape),
                got: format!("{:?}", ex.features.shape()),
            });
        }
        if ex.label >= outputs {
            return Err(NnError::LabelOutOfRange { label: ex.label, num_outputs: outputs });
        }
    }
    if let Some(missing) = (0..outputs).find(|&c| !data.iter().any(|e| e.label == c)) {
        return Err(NnError::EmptyClass(missing));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train_idx, val_idx) = split_indices(data, outputs, cfg.validation_split, &mut rng);
    let mut weights = Weights::init(spec, &mut rng)?;
    let adam = AdamConfig { learning_rate: cfg.learning_rate, ..Default::default() };
    let mut state = AdamState::new(&weights);
    let mut step = 0u64;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0;
        for (b, chunk) in train_idx.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&Example, u64)> = chunk.iter().map(|&i| (&data[i], rng.gen())).collect();
            let (loss, correct, grads) = batch_gradients(spec, &shapes, &weights, &batch)?;
            if !loss.is_finite() {
                return Err(NnError::NonFiniteLoss { epoch, batch: b, loss });
            }
            step += 1;
            adam_step(&mut weights, &grads, &mut state, step, &adam)?;
            epoch_loss += loss;
            epoch_correct += correct;
        }
        let n = train_idx.len().max(1) as f64;
        let (val_loss, val_accuracy) = evaluate(spec, &shapes, &weights, data, &val_idx);
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / n,
            train_accuracy: epoch_correct as f64 / n,
            val_loss,
            val_accuracy,
        });
    }
    weights.round_to_f32();
    Ok(TrainOutcome { weights, history, validation_indices: val_idx })
}
