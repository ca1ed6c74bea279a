//! Frontend + network bundle used by the simulator, the CLI and the demo.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::{AudioClip, DspError, FeatureMatrix, Frontend};
use crate::labels::Label;
use crate::nn::{
    fit, forward, load_weights, save_weights, Example, ModelSpec, NnError, Prediction, TrainConfig, TrainOutcome,
    Weights, DEFAULT_THRESHOLD,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("clip has no label")]
    Unlabeled,
    #[error("frontend output {frontend:?} does not match model input {model:?}")]
    ShapeMismatch { frontend: (usize, usize), model: (usize, usize) },
    #[error("sidecar {path}: {message}")]
    Sidecar { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Extracts features for a labeled clip set.
pub fn featurize(frontend: &Frontend, clips: &[AudioClip]) -> Result<Vec<Example>> {
    let ex = frontend.build()?;
    let one = |c: &AudioClip| -> Result<Example> {
        let label = c.label.ok_or(PipelineError::Unlabeled)?;
        Ok(Example { features: ex.extract(c)?, label: label.index() })
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        clips.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    clips.iter().map(one).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    frontend: Frontend,
    threshold: f64,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub frontend: Frontend,
    pub spec: ModelSpec,
    pub weights: Weights,
    pub threshold: f64,
    extractor: crate::dsp::FeatureExtractor,
}

impl Classifier {
    pub fn new(frontend: Frontend, spec: ModelSpec, weights: Weights, threshold: f64) -> Result<Self> {
        spec.validate_classifier()?;
        weights.check(&spec)?;
        let shape = frontend.clip_shape().ok_or(DspError::ClipTooShort {
            len: frontend.sample_rate_hz as usize,
            frame_len: frontend.frame.frame_len,
        })?;
        if shape != spec.input_shape {
            return Err(PipelineError::ShapeMismatch { frontend: shape, model: spec.input_shape });
        }
        let extractor = frontend.build()?;
        Ok(Self { frontend, spec, weights, threshold, extractor })
    }

    /// Trains `spec` on labeled clips with the given frontend.
    pub fn train(frontend: Frontend, spec: ModelSpec, clips: &[AudioClip], cfg: &TrainConfig) -> Result<(Self, TrainOutcome)> {
        let data = featurize(&frontend, clips)?;
        let outcome = fit(&spec, &data, cfg)?;
        let c = Self::new(frontend, spec, outcome.weights.clone(), DEFAULT_THRESHOLD)?;
        Ok((c, outcome))
    }

    pub fn features(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        Ok(self.extractor.extract(clip)?)
    }

    pub fn predict_features(&self, features: &FeatureMatrix) -> Result<Prediction> {
        Ok(Prediction::new(forward(&self.spec, &self.weights, features)?, self.threshold))
    }

    pub fn predict(&self, clip: &AudioClip) -> Result<Prediction> {
        self.predict_features(&self.features(clip)?)
    }

    /// Argmax label, ignoring the threshold.
    pub fn top_label(&self, clip: &AudioClip) -> Result<Label> {
        let p = self.predict(clip)?;
        let best = (0..p.probabilities.len()).fold(0, |b, i| if p.probabilities[i] > p.probabilities[b] { i } else { b });
        Ok(Label::from_index(best).expect("classifier has five outputs"))
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the RSNN weight file and a `<path>.json` sidecar holding the
    /// frontend and threshold.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_weights(&self.spec, &self.weights, path)?;
        let side = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&Sidecar { frontend: self.frontend.clone(), threshold: self.threshold })
            .expect("sidecar serializes");
        fs::write(&side, json + "\n").map_err(|e| PipelineError::Sidecar { path: side, message: e.to_string() })
    }

    /// Loads a weight file; without a sidecar the default MFE frontend and
    /// threshold are assumed.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (spec, weights) = load_weights(path)?;
        let side = Self::sidecar_path(path);
        let sidecar = match fs::read_to_string(&side) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| PipelineError::Sidecar { path: side.clone(), message: e.to_string() })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Sidecar { frontend: Frontend::default(), threshold: DEFAULT_THRESHOLD }
            }
            Err(e) => return Err(PipelineError::Sidecar { path: side, message: e.to_string() }),
        };
        Self::new(sidecar.frontend, spec, weights, sidecar.threshold)
    }
}
