//! Phase-labelled feature sequences: storage, synthesis, sampling,
//! augmentation and token masking.

use ndarray::{s, Array2, Axis};

use crate::error::{Result, TunesError};

pub mod augment;
pub mod format;
pub mod manifest;
pub mod masking;
pub mod sampler;
pub mod synth;

/// One video: a `T×D` feature matrix and `T` phase labels in `1..=C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseDatasetEntry {
    pub video_id: String,
    pub features: Array2<f32>,
    pub labels: Vec<u8>,
}

impl PhaseDatasetEntry {
    pub fn new(video_id: impl Into<String>, features: Array2<f32>, labels: Vec<u8>) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(TunesError::shape(format!("empty feature matrix {:?}", features.dim())));
        }
        if features.nrows() != labels.len() {
            return Err(TunesError::shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(index) = labels.iter().position(|&l| l == 0) {
            return Err(TunesError::LabelOutOfRange {
                label: 0,
                num_classes: usize::from(u8::MAX),
                index,
            });
        }
        Ok(Self {
            video_id: video_id.into(),
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Checks every label against `num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| usize::from(l) > num_classes) {
            Some(index) => Err(TunesError::LabelOutOfRange {
                label: self.labels[index],
                num_classes,
                index,
            }),
            None => Ok(()),
        }
    }

    /// Frames `start..start + len` as a new entry.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(TunesError::shape(format!(
                "window {start}+{len} outside sequence of {}",
                self.len()
            )));
        }
        Ok(Self {
            video_id: self.video_id.clone(),
            features: self.features.slice(s![start..start + len, ..]).to_owned(),
            labels: self.labels[start..start + len].to_vec(),
        })
    }

    /// Rows picked by `source` indices (features and labels in lockstep).
    pub fn reindex(&self, source: &[usize]) -> Self {
        Self {
            video_id: self.video_id.clone(),
            features: self.features.select(Axis(0), source),
            labels: source.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Extends the sequence to a multiple of `multiple` frames by repeating the
    /// last frame and label. Returns the padded entry and the original length.
    pub fn pad_to_multiple(&self, multiple: usize) -> (Self, usize) {
        let len = self.len();
        let padded = len.div_ceil(multiple.max(1)) * multiple.max(1);
        let source: Vec<usize> = (0..padded).map(|i| i.min(len - 1)).collect();
        (self.reindex(&source), len)
    }

    /// Indices where the label differs from the previous frame.
    pub fn transitions(&self) -> Vec<usize> {
        transitions(&self.labels)
    }
}

/// Indices `t ≥ 1` with `labels[t] != labels[t - 1]`.
pub fn transitions(labels: &[u8]) -> Vec<usize> {
    (1..labels.len()).filter(|&t| labels[t] != labels[t - 1]).collect()
}
