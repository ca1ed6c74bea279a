use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::wav::{read_wav, write_wav, WavError};
use super::{generate_clip, mix_seed};
use crate::dsp::AudioClip;
use crate::labels::{Label, NUM_CLASSES};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.84;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("train fraction {0} outside [0, 1]")]
    BadFraction(f64),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Per-class clip counts for each split, in label order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPlan {
    pub train: [usize; NUM_CLASSES],
    pub test: [usize; NUM_CLASSES],
}

fn spread(total: usize) -> [usize; NUM_CLASSES] {
    let mut out = [total / NUM_CLASSES; NUM_CLASSES];
    for c in out.iter_mut().take(total % NUM_CLASSES) {
        *c += 1;
    }
    out
}

impl DatasetPlan {
    /// `per_class_n` clips for every class; the overall train total is
    /// `round(5 * per_class_n * train_fraction)`, spread evenly with the
    /// remainder going to the earliest labels.
    pub fn from_fraction(per_class_n: usize, train_fraction: f64) -> Result<Self, DatasetError> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(DatasetError::BadFraction(train_fraction));
        }
        let total = per_class_n * NUM_CLASSES;
        let train = spread((total as f64 * train_fraction).round() as usize);
        let test = train.map(|t| per_class_n - t);
        Ok(Self { train, test })
    }

    pub fn from_totals(train_total: usize, test_total: usize) -> Self {
        Self { train: spread(train_total), test: spread(test_total) }
    }

    /// Full-size file counts of the original field collection.
    pub fn full_scale() -> Self {
        Self::from_totals(8040, 1608)
    }

    pub fn train_total(&self) -> usize {
        self.train.iter().sum()
    }

    pub fn test_total(&self) -> usize {
        self.test.iter().sum()
    }

    /// Every clip in the plan as `(split, label, index within class, clip seed)`.
    /// Train clips take the first indices of each class, test clips follow.
    pub fn entries(&self, seed: u64) -> Vec<(Split, Label, usize, u64)> {
        let mut out = Vec::with_capacity(self.train_total() + self.test_total());
        for split in [Split::Train, Split::Test] {
            for label in Label::ALL {
                let c = label.index();
                let (offset, n) = match split {
                    Split::Train => (0, self.train[c]),
                    Split::Test => (self.train[c], self.test[c]),
                };
                for i in offset..offset + n {
                    out.push((split, label, i, clip_seed(seed, i)));
                }
            }
        }
        out
    }

    /// Generates the clips in memory without touching the filesystem.
    pub fn generate(&self, seed: u64) -> Vec<(Split, AudioClip)> {
        let entries = self.entries(seed);
        let one = |&(split, label, _, s): &(Split, Label, usize, u64)| (split, generate_clip(label, s));
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            entries.par_iter().map(one).collect()
        }
        #[cfg(not(feature = "parallel"))]
        entries.iter().map(one).collect()
    }
}

/// Seed of the `index`th clip of a class; the label is mixed in by the generator.
pub fn clip_seed(seed: u64, index: usize) -> u64 {
    mix_seed(seed, 0x1000 + index as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory, `/`-separated.
    pub path: String,
    pub label: Label,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub plan: DatasetPlan,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split, label: Label) -> usize {
        self.entries.iter().filter(|e| e.split == split && e.label == label).count()
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Reads every clip of `split`, attaching its manifest label.
    pub fn read_split(&self, dir: impl AsRef<Path>, split: Split) -> Result<Vec<AudioClip>, DatasetError> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| Ok(read_wav(dir.as_ref().join(&e.path))?.with_label(e.label)))
            .collect()
    }
}

pub fn generate_dataset(
    per_class_n: usize,
    train_fraction: f64,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest, DatasetError> {
    generate_dataset_with_plan(&DatasetPlan::from_fraction(per_class_n, train_fraction)?, seed, out_dir)
}

/// Writes `{split}/{label}/{label}_{index:05}.wav` files plus `manifest.json`.
pub fn generate_dataset_with_plan(
    plan: &DatasetPlan,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest, DatasetError> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let entries = plan.entries(seed);
    let clips = plan.generate(seed);
    let mut manifest = DatasetManifest { seed, plan: plan.clone(), entries: Vec::with_capacity(entries.len()) };
    for ((split, label, index, clip_seed), (_, clip)) in entries.into_iter().zip(clips) {
        let rel = format!("{}/{}/{}_{:05}.wav", split.dir_name(), label.name(), label.name(), index);
        let path = out_dir.join(&rel);
        let parent = path.parent().expect("nested path");
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        write_wav(&clip, &path)?;
        manifest.entries.push(ManifestEntry { path: rel, label, split, seed: clip_seed });
    }
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_plan_splits_504_96() {
        let p = DatasetPlan::from_fraction(120, DEFAULT_TRAIN_FRACTION).unwrap();
        assert_eq!(p.train_total(), 504);
        assert_eq!(p.test_total(), 96);
        assert_eq!(p.train, [101, 101, 101, 101, 100]);
        for c in 0..NUM_CLASSES {
            assert_eq!(p.train[c] + p.test[c], 120);
        }
    }

    #[test]
    fn full_scale_totals() {
        let p = DatasetPlan::full_scale();
        assert_eq!((p.train_total(), p.test_total()), (8040, 1608));
    }

    #[test]
    fn bad_fraction_rejected() {
        assert!(DatasetPlan::from_fraction(10, 1.5).is_err());
    }

    #[test]
    fn empty_dataset_writes_no_audio() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(0, 0.84, 1, dir.path()).unwrap();
        assert!(m.entries.is_empty());
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from(MANIFEST_FILE)]);
    }

    #[test]
    fn files_exist_and_parse() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(3, 0.84, 9, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 15);
        assert_eq!(DatasetManifest::load(dir.path()).unwrap(), m);
        for e in &m.entries {
            let clip = read_wav(dir.path().join(&e.path)).unwrap();
            assert_eq!(clip.with_label(e.label), generate_clip(e.label, e.seed));
        }
        let train = m.read_split(dir.path(), Split::Train).unwrap();
        assert_eq!(train.len(), m.plan.train_total());
    }

    #[test]
    fn unwritable_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        fs::write(&file, b"x").unwrap();
        assert!(matches!(generate_dataset(1, 0.84, 1, file.join("sub")), Err(DatasetError::Io { .. })));
    }
}
