//! A small sequential network: 1-D convolutions over time, max pooling,
//! dense layers and a softmax head, trained with Adam on categorical
//! cross-entropy.
//!
//! Parameters are held as `f64` while training and stored as little-endian
//! `f32` in the `RSNN` weight file. [`fit`] returns weights already rounded
//! to `f32` precision so a save/load round trip is bit-exact.

mod adam;
mod engine;
mod format;
mod quant;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use engine::{classify, classify_index, forward, gradients, softmax, Example, Gradients, Prediction};
pub use format::{load_weights, read_weights, save_weights, write_weights, FORMAT_VERSION, MAGIC};
pub use quant::{quantize, QuantizedLayer, QuantizedWeights, SCALE_FLOOR};
pub use train::{fit, EpochStats, TrainConfig, TrainOutcome};

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Probability a prediction must reach before it is reported as a class.
pub const DEFAULT_THRESHOLD: f64 = 0.6;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("class {0} has no training examples")]
    EmptyClass(usize),
    #[error("label {label} out of range for {num_outputs} outputs")]
    LabelOutOfRange { label: usize, num_outputs: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("not an RSNN weight file")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u16),
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// Valid (unpadded) convolution along time with unit stride.
    Conv1d { filters: usize, kernel: usize, activation: Activation },
    MaxPool1d { size: usize },
    Flatten,
    Dense { units: usize, activation: Activation },
    /// Inverted dropout; identity outside training.
    Dropout { rate: f64 },
    Softmax,
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Seq { len: usize, channels: usize },
    Flat(usize),
}

impl Shape {
    pub fn size(self) -> usize {
        match self {
            Shape::Seq { len, channels } => len * channels,
            Shape::Flat(n) => n,
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Seq { len, channels } => write!(f, "{len}x{channels}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `(frames, coefficients)`
    pub input_shape: (usize, usize),
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    pub fn new(input_shape: (usize, usize), layers: Vec<Layer>) -> Self {
        Self { input_shape, layers }
    }

    /// conv(8,3) - pool - conv(16,3) - pool - flatten - dropout(0.25) - dense(5) - softmax
    pub fn default_audio(input_shape: (usize, usize)) -> Self {
        Self::conv_template(input_shape, 8, 0, crate::labels::NUM_CLASSES)
    }

    /// The two-block convolutional family explored by the tuner. A
    /// `hidden_units` of zero omits the hidden dense layer.
    pub fn conv_template(input_shape: (usize, usize), width: usize, hidden_units: usize, outputs: usize) -> Self {
        let mut layers = vec![
            Layer::Conv1d { filters: width, kernel: 3, activation: Activation::Relu },
            Layer::MaxPool1d { size: 2 },
            Layer::Conv1d { filters: 2 * width, kernel: 3, activation: Activation::Relu },
            Layer::MaxPool1d { size: 2 },
            Layer::Flatten,
            Layer::Dropout { rate: 0.25 },
        ];
        if hidden_units > 0 {
            layers.push(Layer::Dense { units: hidden_units, activation: Activation::Relu });
        }
        layers.push(Layer::Dense { units: outputs, activation: Activation::Linear });
        layers.push(Layer::Softmax);
        Self { input_shape, layers }
    }

    pub fn input(&self) -> Shape {
        Shape::Seq { len: self.input_shape.0, channels: self.input_shape.1 }
    }

    /// Shapes before the first layer and after every layer, validating the
    /// chain along the way.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let shapes = self.chain()?;
        if self.layers.last() != Some(&Layer::Softmax) {
            return Err(NnError::InvalidSpec("model must end with softmax".into()));
        }
        Ok(shapes)
    }

    /// Like [`ModelSpec::shapes`] but without requiring a softmax head, so
    /// partial stacks can be costed.
    pub fn chain(&self) -> Result<Vec<Shape>> {
        let bad = |i: usize, msg: String| NnError::InvalidSpec(format!("layer {i}: {msg}"));
        let (rows, cols) = self.input_shape;
        if rows == 0 || cols == 0 {
            return Err(NnError::InvalidSpec("input shape must be non-empty".into()));
        }
        let mut shapes = vec![self.input()];
        let mut cur = self.input();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (*layer, cur) {
                (Layer::Conv1d { filters, kernel, .. }, Shape::Seq { len, .. }) => {
                    if filters == 0 || kernel == 0 {
                        return Err(bad(i, "conv1d needs filters >= 1 and kernel >= 1".into()));
                    }
                    if kernel > len {
                        return Err(bad(i, format!("kernel {kernel} longer than sequence {len}")));
                    }
                    Shape::Seq { len: len - kernel + 1, channels: filters }
                }
                (Layer::MaxPool1d { size }, Shape::Seq { len, channels }) => {
                    if size == 0 || len / size == 0 {
                        return Err(bad(i, format!("pool size {size} does not fit sequence {len}")));
                    }
                    Shape::Seq { len: len / size, channels }
                }
                (Layer::Flatten, s) => Shape::Flat(s.size()),
                (Layer::Dense { units, .. }, Shape::Flat(_)) => {
                    if units == 0 {
                        return Err(bad(i, "dense needs units >= 1".into()));
                    }
                    Shape::Flat(units)
                }
                (Layer::Dropout { rate }, s) => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(bad(i, format!("dropout rate {rate} outside [0, 1)")));
                    }
                    s
                }
                (Layer::Softmax, Shape::Flat(n)) => {
                    if i + 1 != self.layers.len() {
                        return Err(bad(i, "softmax must be the final layer".into()));
                    }
                    Shape::Flat(n)
                }
                (l, s) => return Err(bad(i, format!("{l:?} cannot take input of shape {s}"))),
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Checks the spec is a five-class audio classifier.
    pub fn validate_classifier(&self) -> Result<()> {
        self.validate()?;
        let n = self.num_outputs()?;
        if n != crate::labels::NUM_CLASSES {
            return Err(NnError::InvalidSpec(format!(
                "classifier must output {} logits, spec outputs {n}",
                crate::labels::NUM_CLASSES
            )));
        }
        Ok(())
    }

    pub fn num_outputs(&self) -> Result<usize> {
        Ok(self.shapes()?.last().map(|s| s.size()).unwrap_or(0))
    }

    /// `(weight count, bias count)` per layer.
    pub fn param_shapes(&self) -> Result<Vec<(usize, usize)>> {
        let shapes = self.chain()?;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .map(|(layer, input)| match (*layer, *input) {
                (Layer::Conv1d { filters, kernel, .. }, Shape::Seq { channels, .. }) => {
                    (filters * kernel * channels, filters)
                }
                (Layer::Dense { units, .. }, s) => (units * s.size(), units),
                _ => (0, 0),
            })
            .collect())
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.param_shapes()?.iter().map(|(w, b)| w + b).sum())
    }

    /// Multiply-accumulate operations for one forward pass.
    pub fn macs(&self) -> Result<u64> {
        let shapes = self.chain()?;
        Ok(self
            .layers
            .iter()
            .zip(shapes.windows(2))
            .map(|(layer, io)| match (*layer, io[0], io[1]) {
                (Layer::Conv1d { kernel, .. }, Shape::Seq { channels, .. }, Shape::Seq { len, channels: f }) => {
                    (len * f * kernel * channels) as u64
                }
                (Layer::Dense { units, .. }, s, _) => (units * s.size()) as u64,
                _ => 0,
            })
            .sum())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Per-layer parameters; layers without parameters hold empty arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights {
    pub layers: Vec<LayerParams>,
}

impl Weights {
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        Ok(Self {
            layers: spec
                .param_shapes()?
                .into_iter()
                .map(|(w, b)| LayerParams { weights: vec![0.0; w], bias: vec![0.0; b] })
                .collect(),
        })
    }

    /// Uniform He initialization, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`,
    /// with zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        let mut w = Self::zeros(spec)?;
        for (params, (wc, bc)) in w.layers.iter_mut().zip(spec.param_shapes()?) {
            if bc == 0 {
                continue;
            }
            let fan_in = wc / bc;
            let limit = (6.0 / fan_in as f64).sqrt();
            params.weights.iter_mut().for_each(|v| *v = rng.gen_range(-limit..limit));
        }
        Ok(w)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(LayerParams::iter)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(LayerParams::iter_mut)
    }

    pub fn same_shape(&self, other: &Weights) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.len() == b.weights.len() && a.bias.len() == b.bias.len())
    }

    /// Checks the parameter arrays match what `spec` requires.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let shapes = spec.param_shapes()?;
        let ok = shapes.len() == self.layers.len()
            && shapes.iter().zip(&self.layers).all(|(&(w, b), p)| p.weights.len() == w && p.bias.len() == b);
        if ok {
            Ok(())
        } else {
            Err(NnError::ShapeMismatch {
                expected: format!("{shapes:?}"),
                got: format!("{:?}", self.layers.iter().map(|p| (p.weights.len(), p.bias.len())).collect::<Vec<_>>()),
            })
        }
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        self.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
