//! Sequence-level augmentation: delaying the whole video and randomly
//! dropping or duplicating frames. Both operate through a source-index map
//! so features and labels stay aligned.

use rand::Rng;

use super::PhaseDatasetEntry;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Largest delay in frames; the delay is uniform in `0..=max_shift`.
    pub max_shift: usize,
    pub drop_prob: f64,
    pub duplicate_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_shift: 18,
            drop_prob: 0.05,
            duplicate_prob: 0.05,
        }
    }
}

/// Source frame of every output frame after delaying by `delta`.
pub fn shift_indices(len: usize, delta: usize) -> Vec<usize> {
    (0..len).map(|i| i.saturating_sub(delta)).collect()
}

/// Source frame of every output frame after dropping/duplicating. Never
/// returns an empty map for a non-empty input.
pub fn speed_indices<R: Rng + ?Sized>(len: usize, drop_prob: f64, duplicate_prob: f64, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(len + len / 8);
    for i in 0..len {
        let u: f64 = rng.gen();
        if u < drop_prob {
            continue;
        }
        out.push(i);
        if u < drop_prob + duplicate_prob {
            out.push(i);
        }
    }
    if out.is_empty() && len > 0 {
        out.push(0);
    }
    out
}

/// Delays the sequence by a uniform number of frames in `0..=max_shift`,
/// padding the front with the first frame and keeping the length.
pub fn augment_shift<R: Rng + ?Sized>(entry: &PhaseDatasetEntry, max_shift: usize, rng: &mut R) -> PhaseDatasetEntry {
    let delta = rng.gen_range(0..=max_shift);
    entry.reindex(&shift_indices(entry.len(), delta))
}

pub fn augment_speed<R: Rng + ?Sized>(
    entry: &PhaseDatasetEntry,
    drop_prob: f64,
    duplicate_prob: f64,
    rng: &mut R,
) -> PhaseDatasetEntry {
    entry.reindex(&speed_indices(entry.len(), drop_prob, duplicate_prob, rng))
}

/// Shift followed by speed change.
pub fn augment<R: Rng + ?Sized>(entry: &PhaseDatasetEntry, config: &AugmentConfig, rng: &mut R) -> PhaseDatasetEntry {
    let shifted = augment_shift(entry, config.max_shift, rng);
    augment_speed(&shifted, config.drop_prob, config.duplicate_prob, rng)
}
