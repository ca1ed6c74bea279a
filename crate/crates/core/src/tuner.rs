//! Device-budget-aware search over frontend and model configurations.
//!
//! Costs come from a small documented model rather than a vendor profiler:
//!
//! * RAM: the float32 feature matrix plus the largest pair of consecutive
//!   activation buffers (a layer's input and output live at the same time).
//! * ROM: float32 parameters plus a fixed code allowance.
//! * Latency: `cycles_per_mac` per multiply-accumulate plus
//!   `fft_factor * N log2 N` cycles per FFT frame, at the device clock.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dsp::{AudioClip, Frontend, FrontendKind};
use crate::labels::NUM_CLASSES;
use crate::nn::{fit, ModelSpec, NnError, TrainConfig};
use crate::pipeline::{featurize, PipelineError};

#[derive(Debug, thiserror::Error)]
pub enum TunerError {
    #[error("no candidates to tune")]
    NoCandidates,
    #[error("every candidate exceeds the device budget")]
    NoFeasibleCandidate,
    #[error("candidate {id}: {source}")]
    Candidate { id: String, source: PipelineError },
    #[error("invalid model: {0}")]
    Model(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceBudget {
    pub sram_bytes: u64,
    pub flash_bytes: u64,
    pub clock_hz: u64,
    /// Upper bound on DSP + inference time per one-second clip.
    pub latency_budget_ms: f64,
}

impl Default for DeviceBudget {
    fn default() -> Self {
        Self { sram_bytes: 262_144, flash_bytes: 1_048_576, clock_hz: 64_000_000, latency_budget_ms: 1000.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub cycles_per_mac: f64,
    pub fft_factor: f64,
    pub code_allowance_bytes: u64,
    pub bytes_per_value: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { cycles_per_mac: 2.0, fft_factor: 30.0, code_allowance_bytes: 51_200, bytes_per_value: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub ram_bytes: u64,
    pub rom_bytes: u64,
    pub dsp_latency_ms: f64,
    pub inference_latency_ms: f64,
    pub latency_ms: f64,
}

impl CostEstimate {
    pub fn fits(&self, budget: &DeviceBudget) -> bool {
        self.ram_bytes <= budget.sram_bytes
            && self.rom_bytes <= budget.flash_bytes
            && self.latency_ms <= budget.latency_budget_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfig {
    pub id: String,
    pub frontend: Frontend,
    pub model: ModelSpec,
}

impl CandidateConfig {
    pub fn validate(&self) -> Result<(), TunerError> {
        self.model.validate_classifier()?;
        let shape = self.frontend.clip_shape();
        if shape != Some(self.model.input_shape) {
            return Err(TunerError::Model(NnError::ShapeMismatch {
                expected: format!("{:?}", self.model.input_shape),
                got: format!("{shape:?}"),
            }));
        }
        self.frontend.build().map_err(|e| TunerError::Candidate { id: self.id.clone(), source: e.into() })?;
        Ok(())
    }
}

pub fn estimate_cost(candidate: &CandidateConfig, budget: &DeviceBudget) -> Result<CostEstimate, TunerError> {
    estimate_cost_with(&CostModel::default(), candidate, budget)
}

pub fn estimate_cost_with(cm: &CostModel, candidate: &CandidateConfig, budget: &DeviceBudget) -> Result<CostEstimate, TunerError> {
    let spec = &candidate.model;
    let shapes = spec.chain()?;
    let (rows, cols) = spec.input_shape;
    let feature_bytes = (rows * cols) as u64 * cm.bytes_per_value;
    let peak_pair = shapes.windows(2).map(|w| (w[0].size() + w[1].size()) as u64).max().unwrap_or(0);
    let ram_bytes = feature_bytes + peak_pair * cm.bytes_per_value;
    let rom_bytes = spec.param_count()? as u64 * cm.bytes_per_value + cm.code_allowance_bytes;

    let fft = candidate.frontend.frame.fft_size as f64;
    let frames = candidate.frontend.clip_shape().map_or(0, |s| s.0) as f64;
    let to_ms = |cycles: f64| cycles / budget.clock_hz as f64 * 1000.0;
    let dsp_latency_ms = to_ms(cm.fft_factor * frames * fft * fft.log2());
    let inference_latency_ms = to_ms(cm.cycles_per_mac * spec.macs()? as f64);
    Ok(CostEstimate {
        ram_bytes,
        rom_bytes,
        dsp_latency_ms,
        inference_latency_ms,
        latency_ms: dsp_latency_ms + inference_latency_ms,
    })
}

/// Axes of the search grid. An empty `filter_counts` keeps each frontend's
/// own filter count and an empty `dense_widths` means no hidden layer; an
/// empty `frontends` or `conv_widths` yields no candidates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub frontends: Vec<Frontend>,
    pub filter_counts: Vec<usize>,
    pub conv_widths: Vec<usize>,
    pub dense_widths: Vec<usize>,
}

impl SearchSpace {
    /// MFE and MFCC frontends, two filter counts, three conv widths and two
    /// head shapes: 24 points.
    pub fn desk_default() -> Self {
        Self {
            frontends: vec![Frontend::default(), Frontend::mfcc(13, true)],
            filter_counts: vec![32, 40],
            conv_widths: vec![4, 8, 16],
            dense_widths: vec![0, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedCandidate {
    pub id: String,
    pub reason: String,
}

fn candidate_id(fe: &Frontend, width: usize, hidden: usize) -> String {
    let front = match fe.kind {
        FrontendKind::Mfe => format!("mfe{}", fe.num_filters),
        FrontendKind::Mfcc { num_coeffs, drop_c0 } => {
            format!("mfcc{num_coeffs}{}-f{}", if drop_c0 { "d" } else { "" }, fe.num_filters)
        }
    };
    format!("{front}-w{width}-h{hidden}")
}

/// Cartesian product of the grid in axis order; invalid points are
/// reported instead of emitted.
pub fn enumerate_candidates(space: &SearchSpace) -> (Vec<CandidateConfig>, Vec<DroppedCandidate>) {
    let mut out = Vec::new();
    let mut dropped = Vec::new();
    let dense = if space.dense_widths.is_empty() { vec![0] } else { space.dense_widths.clone() };
    for base in &space.frontends {
        let filters: Vec<usize> =
            if space.filter_counts.is_empty() { vec![base.num_filters] } else { space.filter_counts.clone() };
        for &nf in &filters {
            let fe = Frontend { num_filters: nf, ..base.clone() };
            for &w in &space.conv_widths {
                for &h in &dense {
                    let id = candidate_id(&fe, w, h);
                    let Some(shape) = fe.clip_shape() else {
                        dropped.push(DroppedCandidate { id, reason: "clip shorter than one frame".into() });
                        continue;
                    };
                    let c = CandidateConfig { id: id.clone(), frontend: fe.clone(), model: ModelSpec::conv_template(shape, w, h, NUM_CLASSES) };
                    match c.validate() {
                        Ok(()) => out.push(c),
                        Err(e) => dropped.push(DroppedCandidate { id, reason: e.to_string() }),
                    }
                }
            }
        }
    }
    (out, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub validation_split: f64,
    pub batch_size: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { epochs: 20, seed: t.seed, learning_rate: t.learning_rate, validation_split: t.validation_split, batch_size: t.batch_size }
    }
}

impl TuneConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            validation_split: self.validation_split,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub id: String,
    pub accuracy: f64,
    pub cost: CostEstimate,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: CandidateConfig,
    pub leaderboard: Vec<LeaderboardEntry>,
}

/// Feasible first, then higher accuracy, lower latency, lower RAM, id.
pub fn leaderboard_order(a: &LeaderboardEntry, b: &LeaderboardEntry) -> std::cmp::Ordering {
    b.feasible
        .cmp(&a.feasible)
        .then(b.accuracy.total_cmp(&a.accuracy))
        .then(a.cost.latency_ms.total_cmp(&b.cost.latency_ms))
        .then(a.cost.ram_bytes.cmp(&b.cost.ram_bytes))
        .then_with(|| a.id.cmp(&b.id))
}

/// Validation accuracy of one candidate after the short schedule.
pub fn score_candidate(candidate: &CandidateConfig, clips: &[AudioClip], cfg: &TuneConfig) -> Result<f64, TunerError> {
    let data = featurize(&candidate.frontend, clips).map_err(|e| TunerError::Candidate { id: candidate.id.clone(), source: e })?;
    score_features(candidate, &data, cfg)
}

fn score_features(candidate: &CandidateConfig, data: &[crate::nn::Example], cfg: &TuneConfig) -> Result<f64, TunerError> {
    let out = fit(&candidate.model, data, &cfg.train_config())
        .map_err(|e| TunerError::Candidate { id: candidate.id.clone(), source: e.into() })?;
    Ok(out.history.last().map_or(0.0, |h| h.val_accuracy))
}

/// Trains every candidate with the same seed, costs it against `budget`,
/// and returns the best feasible one with the full leaderboard.
pub fn tune(
    candidates: &[CandidateConfig],
    clips: &[AudioClip],
    budget: &DeviceBudget,
    cfg: &TuneConfig,
) -> Result<TuneOutcome, TunerError> {
    if candidates.is_empty() {
        return Err(TunerError::NoCandidates);
    }
    let mut features: HashMap<String, Vec<crate::nn::Example>> = HashMap::new();
    for c in candidates {
        let key = serde_json::to_string(&c.frontend).expect("frontend serializes");
        if !features.contains_key(&key) {
            let data = featurize(&c.frontend, clips).map_err(|e| TunerError::Candidate { id: c.id.clone(), source: e })?;
            features.insert(key, data);
        }
    }
    let evaluate = |c: &CandidateConfig| -> Result<LeaderboardEntry, TunerError> {
        let cost = estimate_cost(c, budget)?;
        let key = serde_json::to_string(&c.frontend).expect("frontend serializes");
        let accuracy = score_features(c, &features[&key], cfg)?;
        Ok(LeaderboardEntry { id: c.id.clone(), accuracy, cost, feasible: cost.fits(budget) })
    };
    #[cfg(feature = "parallel")]
    let entries: Vec<LeaderboardEntry> = {
        use rayon::prelude::*;
        candidates.par_iter().map(evaluate).collect::<Result<_, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let entries: Vec<LeaderboardEntry> = candidates.iter().map(evaluate).collect::<Result<_, _>>()?;

    let mut leaderboard = entries;
    leaderboard.sort_by(leaderboard_order);
    let top = leaderboard.first().filter(|e| e.feasible).ok_or(TunerError::NoFeasibleCandidate)?;
    let best = candidates.iter().find(|c| c.id == top.id).expect("leaderboard ids come from candidates").clone();
    Ok(TuneOutcome { best, leaderboard })
}

/// `id,accuracy,ram,rom,latency,feasible`
pub fn leaderboard_csv(entries: &[LeaderboardEntry]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "accuracy", "ram", "rom", "latency", "feasible"]).expect("in-memory write");
    for e in entries {
        w.write_record([
            e.id.clone(),
            format!("{:.4}", e.accuracy),
            e.cost.ram_bytes.to_string(),
            e.cost.rom_bytes.to_string(),
            format!("{:.3}", e.cost.latency_ms),
            e.feasible.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer};
    use proptest::prelude::*;

    fn bare(model: ModelSpec) -> CandidateConfig {
        CandidateConfig { id: "t".into(), frontend: Frontend::default(), model }
    }

    #[test]
    fn empty_model_costs_only_code() {
        let c = bare(ModelSpec::new((61, 40), vec![]));
        let e = estimate_cost(&c, &DeviceBudget::default()).unwrap();
        assert_eq!(e.rom_bytes, 51_200);
        assert_eq!(e.ram_bytes, 61 * 40 * 4);
        assert_eq!(e.inference_latency_ms, 0.0);
    }

    #[test]
    fn dense_rom() {
        let c = bare(ModelSpec::new((1, 100), vec![Layer::Flatten, Layer::Dense { units: 10, activation: Activation::Linear }]));
        assert_eq!(c.model.param_count().unwrap(), 1010);
        assert_eq!(estimate_cost(&c, &DeviceBudget::default()).unwrap().rom_bytes, 51_200 + 4040);
    }

    #[test]
    fn default_candidate_costs() {
        let c = bare(ModelSpec::default_audio((61, 40)));
        let e = estimate_cost(&c, &DeviceBudget::default()).unwrap();
        let dsp = 30.0 * 61.0 * 512.0 * 9.0 / 64e6 * 1000.0;
        assert!((e.dsp_latency_ms - dsp).abs() < 1e-9);
        assert!((100.0..=600.0).contains(&e.dsp_latency_ms), "{}", e.dsp_latency_ms);
        assert_eq!(e.rom_bytes, 4 * 2413 + 51_200);
        // input + first conv output is the largest live pair
        assert_eq!(e.ram_bytes, 4 * (61 * 40) + 4 * (61 * 40 + 59 * 8));
        assert!(e.fits(&DeviceBudget::default()));
    }

    #[test]
    fn product_bounds() {
        let space = SearchSpace { frontends: vec![Frontend::default(), Frontend::mfcc(13, true)], conv_widths: vec![4, 8, 16], ..Default::default() };
        let (c, d) = enumerate_candidates(&space);
        assert!(c.len() <= 6);
        assert_eq!(c.len() + d.len(), 6);
        assert!(enumerate_candidates(&SearchSpace { frontends: vec![], ..space }).0.is_empty());
    }

    #[test]
    fn invalid_points_are_reported() {
        let space = SearchSpace {
            frontends: vec![Frontend::mfcc(13, false)],
            filter_counts: vec![8, 40],
            conv_widths: vec![0, 4],
            dense_widths: vec![],
        };
        let (ok, dropped) = enumerate_candidates(&space);
        assert_eq!(ok.len(), 1);
        assert_eq!(ok[0].id, "mfcc13-f40-w4-h0");
        assert_eq!(dropped.len(), 3);
        for c in &ok {
            c.validate().unwrap();
        }
    }

    #[test]
    fn desk_grid_is_valid() {
        let (ok, dropped) = enumerate_candidates(&SearchSpace::desk_default());
        assert_eq!(ok.len(), 24);
        assert!(dropped.is_empty());
    }

    #[test]
    fn csv_header() {
        let e = LeaderboardEntry {
            id: "a".into(),
            accuracy: 0.5,
            cost: CostEstimate { ram_bytes: 1, rom_bytes: 2, dsp_latency_ms: 1.0, inference_latency_ms: 0.5, latency_ms: 1.5 },
            feasible: true,
        };
        assert_eq!(leaderboard_csv(&[e]), "id,accuracy,ram,rom,latency,feasible\na,0.5000,1,2,1.500,true\n");
    }

    fn stack() -> impl Strategy<Value = ModelSpec> {
        (1usize..6, 1usize..4, 0usize..2, 1usize..20).prop_map(|(f, k, pool, units)| {
            let mut layers = vec![Layer::Conv1d { filters: f, kernel: k, activation: Activation::Relu }];
            if pool == 1 {
                layers.push(Layer::MaxPool1d { size: 2 });
            }
            layers.push(Layer::Flatten);
            layers.push(Layer::Dense { units, activation: Activation::Relu });
            ModelSpec::new((20, 6), layers)
        })
    }

    proptest! {
        #[test]
        fn appending_a_layer_never_lowers_rom_or_latency(spec in stack(), units in 1usize..30, kind in 0usize..3) {
            let budget = DeviceBudget::default();
            let before = estimate_cost(&bare(spec.clone()), &budget).unwrap();
            let mut more = spec.clone();
            more.layers.push(match kind {
                0 => Layer::Dense { units, activation: Activation::Linear },
                1 => Layer::Dropout { rate: 0.5 },
                _ => Layer::Softmax,
            });
            let after = estimate_cost(&bare(more), &budget).unwrap();
            prop_assert!(after.rom_bytes >= before.rom_bytes);
            prop_assert!(after.latency_ms >= before.latency_ms);
        }

        #[test]
        fn latency_monotone_in_macs(a in stack(), b in stack()) {
            let budget = DeviceBudget::default();
            let (ca, cb) = (estimate_cost(&bare(a.clone()), &budget).unwrap(), estimate_cost(&bare(b.clone()), &budget).unwrap());
            if a.macs().unwrap() <= b.macs().unwrap() {
                prop_assert!(ca.latency_ms <= cb.latency_ms);
            }
        }
    }
}
