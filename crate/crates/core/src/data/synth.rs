//! Synthetic phase-labelled feature sequences.
//!
//! Each video walks through the phases in order with random durations; the
//! second-to-last phase may reappear inside the last one. A frame's features
//! are the mean vector of its phase plus a per-video offset and temporally
//! correlated noise, so single frames are ambiguous while longer context
//! identifies the phase.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};

use super::PhaseDatasetEntry;
use crate::error::{Result, TunesError};

/// Relative mean phase durations of laparoscopic cholecystectomy recordings.
const SEVEN_PHASE_DURATIONS: [f64; 7] = [125.0, 954.0, 168.0, 739.0, 124.0, 98.0, 83.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_videos: usize,
    pub num_classes: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    /// Standard deviation of the phase mean entries.
    pub class_separation: f64,
    /// Stationary standard deviation of the per-frame noise.
    pub noise_std: f64,
    /// Lag-one autocorrelation of the noise.
    pub noise_correlation: f64,
    /// Standard deviation of a constant per-video feature offset.
    pub video_offset_std: f64,
    /// Log-normal spread of the phase durations.
    pub duration_jitter: f64,
    pub min_phase_len: usize,
    /// Probability that phase `C-1` reappears inside phase `C`.
    pub insertion_prob: f64,
    /// Pairs `(a, b)` whose means are pulled together: `b` moves a fraction
    /// `pair_similarity` of the way towards `a`.
    pub similar_pairs: Vec<(u8, u8)>,
    pub pair_similarity: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_videos: 35,
            num_classes: 7,
            min_len: 300,
            max_len: 420,
            feature_dim: 64,
            class_separation: 0.3,
            noise_std: 1.0,
            noise_correlation: 0.8,
            video_offset_std: 0.1,
            duration_jitter: 0.3,
            min_phase_len: 6,
            insertion_prob: 0.3,
            similar_pairs: vec![(2, 4)],
            pair_similarity: 0.6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 || self.feature_dim == 0 {
            return Err(TunesError::param("num_videos and feature_dim must be positive"));
        }
        if !(1..=usize::from(u8::MAX)).contains(&self.num_classes) {
            return Err(TunesError::param("num_classes must be in 1..=255"));
        }
        if self.min_len < 36 || self.max_len < self.min_len {
            return Err(TunesError::param(format!(
                "duration range {}..={} must satisfy 36 <= min <= max",
                self.min_len, self.max_len
            )));
        }
        if self.min_phase_len == 0 || self.min_phase_len * self.num_classes > self.min_len {
            return Err(TunesError::param(format!(
                "{} phases of at least {} frames do not fit in {} frames",
                self.num_classes, self.min_phase_len, self.min_len
            )));
        }
        let nonneg = [
            self.class_separation,
            self.noise_std,
            self.video_offset_std,
            self.duration_jitter,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(TunesError::param("scales must be finite and non-negative"));
        }
        let unit = [self.insertion_prob, self.pair_similarity];
        if unit.iter().any(|v| !(0.0..=1.0).contains(v)) || !(0.0..1.0).contains(&self.noise_correlation) {
            return Err(TunesError::param("probabilities and correlations must lie in [0, 1]"));
        }
        let c = self.num_classes as u8;
        if self
            .similar_pairs
            .iter()
            .any(|&(a, b)| a == 0 || b == 0 || a > c || b > c || a == b)
        {
            return Err(TunesError::param("similar_pairs must name two distinct valid phases"));
        }
        Ok(())
    }

    fn base_durations(&self) -> Vec<f64> {
        if self.num_classes == 7 {
            SEVEN_PHASE_DURATIONS.to_vec()
        } else {
            vec![1.0; self.num_classes]
        }
    }
}

/// Phase mean vectors, one row per phase.
pub fn phase_means(config: &SynthConfig) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d65_616e);
    let mut means = Array2::from_shape_simple_fn((config.num_classes, config.feature_dim), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * config.class_separation
    });
    for &(a, b) in &config.similar_pairs {
        let target = means.row(usize::from(a) - 1).to_owned();
        let mut row = means.row_mut(usize::from(b) - 1);
        row.zip_mut_with(&target, |v, t| *v += config.pair_similarity * (t - *v));
    }
    means
}

/// Label sequence of one video.
fn phase_labels(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let c = config.num_classes;
    let len = rng.gen_range(config.min_len..=config.max_len);
    let jitter = LogNormal::new(0.0, config.duration_jitter.max(1e-12)).expect("valid log-normal");
    let weights: Vec<f64> = config
        .base_durations()
        .iter()
        .map(|w| w * jitter.sample(rng))
        .collect();
    let total: f64 = weights.iter().sum();
    let spare = len - c * config.min_phase_len;
    let mut durations: Vec<usize> = weights
        .iter()
        .map(|w| config.min_phase_len + (w / total * spare as f64).floor() as usize)
        .collect();
    // hand out frames lost to rounding, largest phase first
    let assigned: usize = durations.iter().sum();
    let largest = (0..c).max_by(|&a, &b| weights[a].total_cmp(&weights[b])).unwrap_or(0);
    durations[largest] += len - assigned;

    let mut labels = Vec::with_capacity(len);
    for (p, &d) in durations.iter().enumerate() {
        labels.extend(std::iter::repeat((p + 1) as u8).take(d));
    }
    if c >= 2 && rng.gen_bool(config.insertion_prob) {
        let last = durations[c - 1];
        let max_insert = last.saturating_sub(4) / 2;
        if max_insert >= 2 {
            let ins = rng.gen_range(2..=max_insert);
            let start = len - last + rng.gen_range(2..=last - ins - 2);
            for l in &mut labels[start..start + ins] {
                *l = (c - 1) as u8;
            }
        }
    }
    labels
}

/// Generates `config.num_videos` videos named `video00`, `video01`, ...
pub fn generate(config: &SynthConfig) -> Result<Vec<PhaseDatasetEntry>> {
    config.validate()?;
    let means = phase_means(config);
    let d = config.feature_dim;
    let rho = config.noise_correlation;
    let innovation = config.noise_std * (1.0 - rho * rho).sqrt();
    (0..config.num_videos)
        .map(|v| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(v as u64 + 1);
            let labels = phase_labels(config, &mut rng);
            let offset = Array1::from_shape_simple_fn(d, || {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * config.video_offset_std
            });
            let mut noise = Array1::from_shape_simple_fn(d, || {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * config.noise_std
            });
            let mut features = Array2::zeros((labels.len(), d));
            for (t, &l) in labels.iter().enumerate() {
                if t > 0 {
                    noise.mapv_inplace(|e| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        rho * e + innovation * z
                    });
                }
                let mean = means.row(usize::from(l) - 1);
                for j in 0..d {
                    features[[t, j]] = (mean[j] + offset[j] + noise[j]) as f32;
                }
            }
            PhaseDatasetEntry::new(format!("video{v:02}"), features, labels)
        })
        .collect()
}

/// Accuracy of assigning every frame to the nearest class mean, with means
/// estimated from the same videos.
pub fn nearest_mean_accuracy(videos: &[PhaseDatasetEntry], num_classes: usize) -> f64 {
    let d = videos.first().map_or(0, PhaseDatasetEntry::feature_dim);
    let mut sums = Array2::<f64>::zeros((num_classes, d));
    let mut counts = vec![0usize; num_classes];
    for v in videos {
        for (row, &l) in v.features.rows().into_iter().zip(&v.labels) {
            let c = usize::from(l) - 1;
            counts[c] += 1;
            sums.row_mut(c).zip_mut_with(&row, |s, &x| *s += f64::from(x));
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums.row_mut(c).mapv_inplace(|s| s / n as f64);
        }
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for v in videos {
        for (row, &l) in v.features.rows().into_iter().zip(&v.labels) {
            let best = (0..num_classes)
                .filter(|&c| counts[c] > 0)
                .map(|c| {
                    let dist: f64 = sums
                        .row(c)
                        .iter()
                        .zip(row.iter())
                        .map(|(m, &x)| (m - f64::from(x)).powi(2))
                        .sum();
                    (c, dist)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map_or(0, |(c, _)| c);
            correct += usize::from(best + 1 == usize::from(l));
            total += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_videos: 6,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a[0].features, c[0].features);
    }

    #[test]
    fn every_video_has_every_phase_and_valid_length() {
        let cfg = SynthConfig {
            num_videos: 40,
            ..SynthConfig::default()
        };
        for v in generate(&cfg).unwrap() {
            assert!((cfg.min_len..=cfg.max_len).contains(&v.len()));
            for p in 1..=7u8 {
                assert!(v.labels.contains(&p), "{} misses phase {p}", v.video_id);
            }
            v.check_classes(7).unwrap();
        }
    }

    #[test]
    fn progression_is_monotone_apart_from_insertions() {
        for v in generate(&SynthConfig::default()).unwrap() {
            for t in v.transitions() {
                let (a, b) = (v.labels[t - 1], v.labels[t]);
                assert!(b == a + 1 || (a, b) == (7, 6) || (a, b) == (6, 7), "{a}->{b}");
            }
        }
    }

    #[test]
    fn degenerate_ranges_are_rejected() {
        assert!(generate(&SynthConfig { min_len: 20, max_len: 30, ..small() }).is_err());
        assert!(generate(&SynthConfig { min_len: 100, max_len: 50, ..small() }).is_err());
        assert!(generate(&SynthConfig { num_videos: 0, ..small() }).is_err());
    }

    #[test]
    fn nearest_mean_accuracy_is_in_learnable_band() {
        let videos = generate(&SynthConfig::default()).unwrap();
        let acc = nearest_mean_accuracy(&videos, 7);
        assert!(acc > 0.6 && acc < 0.98, "{acc}");
    }
}
