//! Training and experiment settings, read from `key = value` files with
//! command-line overrides layered on top.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use tunes::data::augment::AugmentConfig;
use tunes::data::masking::MaskingConfig;
use tunes::data::synth::SynthConfig;
use tunes::kv::KvMap;
use tunes::metrics::RelaxedTolerance;
use tunes::TunesConfig;

use crate::error::{HarnessError, Result};

/// Learning-rate schedule; also decides which epoch's weights are kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Constant rate, keep the epoch with the best validation Macro Jaccard.
    ConstantBestVal,
    /// Cosine annealing per epoch, keep the last epoch.
    CosineLast,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::ConstantBestVal => "constant",
            Schedule::CosineLast => "cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "constant" => Ok(Schedule::ConstantBestVal),
            "cosine" => Ok(Schedule::CosineLast),
            other => Err(format!("unknown schedule {other:?} (constant|cosine)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    pub schedule: Schedule,
    pub smoothing_weight: f64,
    /// Seed for shuffling, augmentation and masking.
    pub seed: u64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub masking: bool,
    pub mask: MaskingConfig,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            epochs: 75,
            grad_clip_norm: 1.0,
            schedule: Schedule::ConstantBestVal,
            smoothing_weight: tunes::objectives::SMOOTHING_WEIGHT,
            seed: 0,
            augment: true,
            augmentation: AugmentConfig::default(),
            masking: true,
            mask: MaskingConfig::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

fn config_err(e: impl fmt::Display) -> HarnessError {
    HarnessError::Config(e.to_string())
}

impl TrainConfig {
    /// Learning rate used during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::ConstantBestVal => self.learning_rate,
            Schedule::CosineLast => {
                let progress = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("grad_clip_norm", self.grad_clip_norm),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err(format!("{name} must be positive, got {v}")));
            }
        }
        if self.epochs == 0 {
            return Err(config_err("epochs must be positive"));
        }
        if !(self.smoothing_weight.is_finite() && self.smoothing_weight >= 0.0) {
            return Err(config_err("smoothing_weight must be non-negative"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err(format!("{name} must lie in [0, 1)")));
            }
        }
        let a = &self.augmentation;
        if !(0.0..=1.0).contains(&(a.drop_prob + a.duplicate_prob)) || a.drop_prob < 0.0 || a.duplicate_prob < 0.0 {
            return Err(config_err("drop and duplicate probabilities must be non-negative and sum to at most 1"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("learning_rate", self.learning_rate.to_string());
        kv.set("epochs", self.epochs.to_string());
        kv.set("grad_clip_norm", self.grad_clip_norm.to_string());
        kv.set("schedule", self.schedule.to_string());
        kv.set("smoothing_weight", self.smoothing_weight.to_string());
        kv.set("train_seed", self.seed.to_string());
        kv.set("augment", self.augment.to_string());
        kv.set("max_shift", self.augmentation.max_shift.to_string());
        kv.set("drop_prob", self.augmentation.drop_prob.to_string());
        kv.set("duplicate_prob", self.augmentation.duplicate_prob.to_string());
        kv.set("masking", self.masking.to_string());
        kv.set("mask_coverage", self.mask.coverage.to_string());
        kv.set("mask_min_span", self.mask.min_span.to_string());
        kv.set("mask_max_span", self.mask.max_span.to_string());
        kv.set("adam_beta1", self.adam_beta1.to_string());
        kv.set("adam_beta2", self.adam_beta2.to_string());
        kv.set("adam_eps", self.adam_eps.to_string());
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! read {
            ($($($field:ident).+ => $key:literal),* $(,)?) => {
                $(if let Some(v) = kv.get_parsed($key)? { c.$($field).+ = v; })*
            };
        }
        read!(
            learning_rate => "learning_rate",
            epochs => "epochs",
            grad_clip_norm => "grad_clip_norm",
            schedule => "schedule",
            smoothing_weight => "smoothing_weight",
            seed => "train_seed",
            augment => "augment",
            augmentation.max_shift => "max_shift",
            augmentation.drop_prob => "drop_prob",
            augmentation.duplicate_prob => "duplicate_prob",
            masking => "masking",
            mask.coverage => "mask_coverage",
            mask.min_span => "mask_min_span",
            mask.max_span => "mask_max_span",
            adam_beta1 => "adam_beta1",
            adam_beta2 => "adam_beta2",
            adam_eps => "adam_eps",
        );
        c.validate()?;
        Ok(c)
    }
}

/// Everything needed to train and evaluate one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: TunesConfig,
    pub train: TrainConfig,
    /// One run per seed; each seed drives both initialisation and training.
    pub seeds: Vec<u64>,
    pub relaxed_tolerance: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: TunesConfig::online(),
            train: TrainConfig::default(),
            seeds: vec![0],
            relaxed_tolerance: 10,
        }
    }
}

fn synth_kv(c: &SynthConfig) -> KvMap {
    let mut kv = KvMap::new();
    kv.set("synth_seed", c.seed.to_string());
    kv.set("num_videos", c.num_videos.to_string());
    kv.set("min_len", c.min_len.to_string());
    kv.set("max_len", c.max_len.to_string());
    kv.set("feature_dim", c.feature_dim.to_string());
    kv.set("class_separation", c.class_separation.to_string());
    kv.set("noise_std", c.noise_std.to_string());
    kv.set("noise_correlation", c.noise_correlation.to_string());
    kv.set("video_offset_std", c.video_offset_std.to_string());
    kv.set("insertion_prob", c.insertion_prob.to_string());
    kv.set("pair_similarity", c.pair_similarity.to_string());
    kv
}

/// Synthetic dataset settings from `kv`; `num_classes` follows the model.
pub fn synth_from_kv(kv: &KvMap) -> Result<SynthConfig> {
    let mut c = SynthConfig {
        num_classes: kv.get_parsed("num_classes")?.unwrap_or(7),
        ..SynthConfig::default()
    };
    macro_rules! read {
        ($($field:ident => $key:literal),* $(,)?) => {
            $(if let Some(v) = kv.get_parsed($key)? { c.$field = v; })*
        };
    }
    read!(
        seed => "synth_seed",
        num_videos => "num_videos",
        min_len => "min_len",
        max_len => "max_len",
        feature_dim => "feature_dim",
        class_separation => "class_separation",
        noise_std => "noise_std",
        noise_correlation => "noise_correlation",
        video_offset_std => "video_offset_std",
        insertion_prob => "insertion_prob",
        pair_similarity => "pair_similarity",
    );
    c.validate()?;
    Ok(c)
}

/// Every key accepted in configuration files.
pub fn known_keys() -> BTreeSet<String> {
    let mut keys = BTreeSet::new();
    let maps = [
        TunesConfig::online().to_kv(),
        TrainConfig::default().to_kv(),
        synth_kv(&SynthConfig::default()),
    ];
    for kv in &maps {
        keys.extend(kv.keys().map(String::from));
    }
    keys.extend(["seeds", "relaxed_tolerance", "num_classes"].map(String::from));
    keys
}

/// Reads an optional file and applies `key=value` overrides in order.
pub fn load_kv(file: Option<&Path>, overrides: &[String]) -> Result<KvMap> {
    let mut kv = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
            KvMap::parse(&text)?
        }
        None => KvMap::new(),
    };
    for pair in overrides {
        kv.assign(pair).map_err(config_err)?;
    }
    let known = known_keys();
    if let Some(bad) = kv.keys().find(|k| !known.contains(*k)) {
        return Err(config_err(format!("unknown configuration key {bad:?}")));
    }
    Ok(kv)
}

impl ExperimentConfig {
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let model = TunesConfig::from_kv(kv)?;
        let train = TrainConfig::from_kv(kv)?;
        let seeds = match kv.get("seeds") {
            Some(s) => s
                .split(',')
                .map(|p| p.trim().parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| config_err(format!("seeds = {s:?}: {e}")))?,
            None => vec![0],
        };
        if seeds.is_empty() {
            return Err(config_err("at least one seed is required"));
        }
        Ok(Self {
            model,
            train,
            seeds,
            relaxed_tolerance: kv.get_parsed("relaxed_tolerance")?.unwrap_or(10),
        })
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = self.model.to_kv();
        kv.merge(&self.train.to_kv());
        let seeds: Vec<String> = self.seeds.iter().map(ToString::to_string).collect();
        kv.set("seeds", seeds.join(","));
        kv.set("relaxed_tolerance", self.relaxed_tolerance.to_string());
        kv
    }

    pub fn tolerance(&self) -> RelaxedTolerance {
        RelaxedTolerance::frames(self.relaxed_tolerance)
    }

    /// Configuration of the run with `seed`.
    pub fn for_seed(&self, seed: u64) -> (TunesConfig, TrainConfig) {
        let model = TunesConfig {
            seed,
            ..self.model.clone()
        };
        let train = TrainConfig {
            seed,
            ..self.train.clone()
        };
        (model, train)
    }
}
