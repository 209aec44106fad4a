//! Utterances, feature/manifest files, padded batching and synthetic corpora.

mod batch;
mod features;
mod manifest;
mod synthetic;

pub use batch::{make_batches, Batch, PackedModality};
pub use features::{read_features, write_features, FEATURE_VERSION, MAGIC};
pub use manifest::{load_manifest, write_manifest, Manifest, ManifestEntry};
pub(crate) use manifest::write_atomic;
pub use synthetic::{
    class_counts_for, derive_seed, generate_synthetic, AudioSource, GeneratedCorpus, SyntheticCorpus,
    SyntheticSpec, SyntheticSplit,
};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Emotion classes in the order used throughout the crate.
pub const DEFAULT_CLASS_NAMES: [&str; 8] = [
    "Neutral", "Happy", "Angry", "Sad", "Disgust", "Contempt", "Surprise", "Fear",
];

/// Training-split class counts after removing Other / No-Agreement samples.
pub const TRAIN_CLASS_COUNTS: [usize; 8] = [25016, 13440, 3053, 3882, 1426, 2443, 2897, 1139];

/// Development-split class counts after the same filtering.
pub const DEV_CLASS_COUNTS: [usize; 8] = [5667, 3340, 2413, 1101, 486, 1323, 729, 282];

pub fn default_class_names() -> Vec<String> {
    DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Looks up a class by name, ignoring ASCII case.
pub fn class_index(class_names: &[String], label: &str) -> Option<usize> {
    class_names.iter().position(|n| n.eq_ignore_ascii_case(label))
}

/// One speech segment: frame-level audio and token-level text features.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T_a, audio_dim]`
    pub audio: Tensor<f32>,
    /// `[T_t, text_dim]`
    pub text: Tensor<f32>,
    pub label: Option<usize>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, audio: Tensor<f32>, text: Tensor<f32>, label: Option<usize>) -> Result<Self> {
        let id = id.into();
        if audio.rank() != 2 || text.rank() != 2 {
            return Err(Error::shape(
                "utterance",
                format!(
                    "{id}: features must be [frames, dim], got audio {:?}, text {:?}",
                    audio.shape(),
                    text.shape()
                ),
            ));
        }
        Ok(Self { id, audio, text, label })
    }

    pub fn audio_dim(&self) -> usize {
        self.audio.shape()[1]
    }

    pub fn text_dim(&self) -> usize {
        self.text.shape()[1]
    }

    pub fn audio_frames(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn text_tokens(&self) -> usize {
        self.text.shape()[0]
    }
}

/// Per-class sample counts of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub split: String,
    pub counts: Vec<usize>,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Class inventory plus per-split class counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub class_names: Vec<String>,
    pub splits: Vec<SplitCounts>,
}

impl DatasetSpec {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, name: &str) -> Option<&SplitCounts> {
        self.splits.iter().find(|s| s.split == name)
    }

    /// Counts labels of `utterances` and appends them as split `name`.
    pub fn add_split(&mut self, name: &str, utterances: &[Utterance]) -> Result<()> {
        let counts = count_labels(utterances, self.n_classes())?;
        self.splits.push(SplitCounts {
            split: name.to_string(),
            counts,
        });
        Ok(())
    }
}

impl fmt::Display for DatasetSpec {
    /// Class-count table with one column per split.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<10}", "Class")?;
        for s in &self.splits {
            write!(f, " | {:>10}", format!("# {}", s.split))?;
        }
        writeln!(f)?;
        for (j, name) in self.class_names.iter().enumerate() {
            write!(f, "{name:<10}")?;
            for s in &self.splits {
                write!(f, " | {:>10}", s.counts.get(j).copied().unwrap_or(0))?;
            }
            writeln!(f)?;
        }
        write!(f, "{:<10}", "Total")?;
        for s in &self.splits {
            write!(f, " | {:>10}", s.total())?;
        }
        writeln!(f)
    }
}

/// Number of labelled utterances per class.
pub fn count_labels(utterances: &[Utterance], n_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; n_classes];
    for u in utterances {
        let y = u
            .label
            .ok_or_else(|| Error::InvalidArgument(format!("utterance {} has no label", u.id)))?;
        *counts.get_mut(y).ok_or_else(|| {
            Error::InvalidArgument(format!("label {y} of {} out of range", u.id))
        })? += 1;
    }
    Ok(counts)
}
