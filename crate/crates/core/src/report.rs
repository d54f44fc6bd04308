//! JSON report and profile files exchanged between pipeline stages.
//!
//! Field order is fixed by the struct definitions and nothing time-dependent
//! is written, so re-running a stage reproduces its file byte for byte.

use std::fs;
use std::io;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::allocator::{BitConfig, BitRange, Budget, LayerProfile};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl ReportError {
    pub fn is_io(&self) -> bool {
        matches!(self, ReportError::Io { .. })
    }
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<(), ReportError> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).expect("report types always serialize");
    text.push('\n');
    fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, ReportError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ReportError::Parse {
        path: path.display().to_string(),
        source,
    })
}

/// Separability result for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScoreEntry {
    pub layer_id: String,
    pub alpha: f64,
    pub c_out: usize,
    /// Total word occurrences over all channels and images.
    pub word_count: usize,
    pub mean_words_per_feature: f64,
    /// Channels that are words in every image (IDF of zero).
    pub saturated_features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresReport {
    pub sample_count: usize,
    pub layers: Vec<LayerScoreEntry>,
}

impl ScoresReport {
    pub fn alpha(&self, layer_id: &str) -> Option<f64> {
        self.layers.iter().find(|l| l.layer_id == layer_id).map(|l| l.alpha)
    }
}

/// Model profile file: ordered quantizable layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileFile {
    pub layers: Vec<LayerProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocatedLayer {
    pub layer_id: String,
    pub bits: u32,
    pub alpha: f64,
    pub theta: f64,
    pub pinned: bool,
}

/// Output of the allocation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub beta: f64,
    pub bit_range: BitRange,
    pub budget: Budget,
    pub layers: Vec<AllocatedLayer>,
    #[serde(flatten)]
    pub config: BitConfig,
}

impl AllocationReport {
    pub fn layer_ids(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.layer_id.clone()).collect()
    }
}
