//! Repeated training runs, evaluation on the test split and run-directory
//! output with checksums.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use tunes::data::format::{read_sequence, write_sequence, FILE_EXTENSION};
use tunes::data::manifest::{Manifest, Split};
use tunes::data::PhaseDatasetEntry;
use tunes::kv::KvMap;
use tunes::metrics::{aggregate, relaxed_metrics, video_metrics, AggregateReport, RelaxedTolerance, VideoMetrics};
use tunes::TunesModel;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::plot::{line_chart, Series};
use crate::train::{predict_labels, train, TrainHistory};

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<PhaseDatasetEntry>,
    pub val: Vec<PhaseDatasetEntry>,
    pub test: Vec<PhaseDatasetEntry>,
}

impl Dataset {
    /// Splits videos in order: the first `train` for training, the next
    /// `val` for validation, the rest for testing.
    pub fn split(videos: Vec<PhaseDatasetEntry>, train: usize, val: usize) -> Self {
        let mut it = videos.into_iter();
        let train_set = it.by_ref().take(train).collect();
        let val_set = it.by_ref().take(val).collect();
        Self {
            train: train_set,
            val: val_set,
            test: it.collect(),
        }
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.train.first().map(PhaseDatasetEntry::feature_dim)
    }

    /// Loads every split named in the manifest. Train and test must be present.
    pub fn load(manifest: &Manifest, num_classes: usize) -> Result<Self> {
        manifest.require(Split::Train)?;
        manifest.require(Split::Test)?;
        let read = |split| -> Result<Vec<PhaseDatasetEntry>> {
            manifest
                .paths(split)
                .into_iter()
                .map(|p| read_sequence(p, num_classes).map_err(HarnessError::from))
                .collect()
        };
        Ok(Self {
            train: read(Split::Train)?,
            val: read(Split::Val)?,
            test: read(Split::Test)?,
        })
    }

    /// Writes every video as a sequence file plus `manifest.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
        let mut manifest = Manifest::default();
        for (split, videos) in [(Split::Train, &self.train), (Split::Val, &self.val), (Split::Test, &self.test)] {
            for v in videos {
                let name = format!("{}.{FILE_EXTENSION}", v.video_id);
                write_sequence(v, &dir.join(&name))?;
                manifest.push(split, name);
            }
        }
        let path = dir.join("manifest.txt");
        std::fs::write(&path, manifest.to_string()).map_err(HarnessError::io(&path))?;
        Ok(path)
    }
}

/// Strict and relaxed per-video metrics on `videos`.
pub fn evaluate(
    model: &TunesModel,
    videos: &[PhaseDatasetEntry],
    tolerance: &RelaxedTolerance,
) -> Result<(Vec<VideoMetrics>, Vec<VideoMetrics>)> {
    let c = model.config().num_classes;
    let mut strict = Vec::with_capacity(videos.len());
    let mut relaxed = Vec::with_capacity(videos.len());
    for v in videos {
        let pred = predict_labels(model, v)?;
        strict.push(video_metrics(&v.labels, &pred, c)?);
        relaxed.push(relaxed_metrics(&v.labels, &pred, c, tolerance)?);
    }
    Ok((strict, relaxed))
}

pub struct RunResult {
    pub seed: u64,
    pub model: TunesModel,
    pub history: TrainHistory,
    pub strict: Vec<VideoMetrics>,
    pub relaxed: Vec<VideoMetrics>,
}

impl RunResult {
    /// Frame accuracy pooled over all test frames.
    pub fn pooled_accuracy(&self) -> f64 {
        let (correct, total) = self.strict.iter().fold((0.0, 0usize), |(c, t), m| {
            (c + m.accuracy * m.num_frames as f64, t + m.num_frames)
        });
        correct / total.max(1) as f64
    }
}

pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
    /// Strict metrics followed by relaxed ones (prefixed `R-`).
    pub report: AggregateReport,
}

/// Trains one model per seed and evaluates each on the test split.
pub fn run_experiment(data: &Dataset, config: &ExperimentConfig) -> Result<ExperimentResult> {
    if data.train.is_empty() || data.test.is_empty() {
        return Err(HarnessError::Config("experiments need train and test videos".into()));
    }
    if let Some(d) = data.feature_dim() {
        if d != config.model.input_dim {
            return Err(HarnessError::Config(format!(
                "videos have {d}-dimensional features but input_dim = {}",
                config.model.input_dim
            )));
        }
    }
    let tolerance = config.tolerance();
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let (model_config, train_config) = config.for_seed(seed);
        let mut model = crate::build_model(&model_config)?;
        let history = train(&mut model, &data.train, &data.val, &train_config)?;
        let (strict, relaxed) = evaluate(&model, &data.test, &tolerance)?;
        runs.push(RunResult {
            seed,
            model,
            history,
            strict,
            relaxed,
        });
    }
    let strict: Vec<_> = runs.iter().map(|r| r.strict.clone()).collect();
    let relaxed: Vec<_> = runs.iter().map(|r| r.relaxed.clone()).collect();
    let mut report = aggregate(&strict)?;
    report.extend(aggregate(&relaxed)?.with_prefix("R-"));
    Ok(ExperimentResult { runs, report })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory that records a checksum for everything written to it.
pub struct RunDir {
    path: PathBuf,
    command: String,
    inputs: Vec<(PathBuf, String)>,
    artifacts: Vec<(String, String)>,
    notes: KvMap,
}

impl RunDir {
    pub fn create(path: &Path, command: &str) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(HarnessError::io(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            command: command.to_string(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            notes: KvMap::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn note(&mut self, key: &str, value: impl Into<String>) {
        self.notes.set(key, value);
    }

    /// Records an input file with its checksum.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(HarnessError::io(path))?;
        self.inputs.push((path.to_path_buf(), sha256_hex(&bytes)));
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.join(name);
        std::fs::write(&path, bytes.as_ref()).map_err(HarnessError::io(&path))?;
        self.artifacts.push((name.to_string(), sha256_hex(bytes.as_ref())));
        Ok(path)
    }

    /// Registers a file produced by other code (e.g. a plot) under `name`.
    pub fn register(&mut self, name: &str) -> Result<()> {
        let path = self.join(name);
        let bytes = std::fs::read(&path).map_err(HarnessError::io(&path))?;
        self.artifacts.push((name.to_string(), sha256_hex(&bytes)));
        Ok(())
    }

    /// Writes `run_manifest.txt`.
    pub fn finish(self) -> Result<PathBuf> {
        let mut text = String::new();
        let _ = writeln!(text, "command = {}", self.command);
        for (k, v) in self.notes.iter() {
            let _ = writeln!(text, "{k} = {v}");
        }
        for (p, sum) in &self.inputs {
            let _ = writeln!(text, "input {sum} {}", p.display());
        }
        for (name, sum) in &self.artifacts {
            let _ = writeln!(text, "artifact {sum} {name}");
        }
        let path = self.join("run_manifest.txt");
        std::fs::write(&path, text).map_err(HarnessError::io(&path))?;
        Ok(path)
    }
}

/// Writes metrics, histories, checkpoints and plots of an experiment.
pub fn write_experiment(result: &ExperimentResult, config: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    dir.write("config.txt", config.to_kv().to_string())?;
    let seeds: Vec<String> = config.seeds.iter().map(ToString::to_string).collect();
    dir.note("seeds", seeds.join(","));
    dir.write("metrics.csv", result.report.to_csv())?;
    let mut per_video = String::from("seed,video,accuracy,macro_precision,macro_recall,macro_jaccard,r_accuracy,r_macro_jaccard\n");
    let mut loss_series = Vec::new();
    let mut val_series = Vec::new();
    for (i, run) in result.runs.iter().enumerate() {
        for (j, (s, r)) in run.strict.iter().zip(&run.relaxed).enumerate() {
            let _ = writeln!(
                per_video,
                "{},{},{},{},{},{},{},{}",
                run.seed,
                j,
                s.accuracy,
                s.macro_precision(),
                s.macro_recall(),
                s.macro_jaccard(),
                r.accuracy,
                r.macro_jaccard()
            );
        }
        dir.write(&format!("history_run{i}_seed{}.csv", run.seed), run.history.to_csv())?;
        let extra = {
            let mut kv = KvMap::new();
            kv.set("selected_epoch", run.history.selected_epoch.to_string());
            kv
        };
        dir.write(
            &format!("model_run{i}_seed{}.safetensors", run.seed),
            tunes::checkpoint::to_bytes(&run.model, &extra)?,
        )?;
        let points = |f: &dyn Fn(&crate::train::EpochRecord) -> Option<f64>| -> Vec<(f64, f64)> {
            run.history
                .epochs
                .iter()
                .filter_map(|e| f(e).map(|v| (e.epoch as f64, v)))
                .collect()
        };
        loss_series.push(Series {
            name: format!("seed {}", run.seed),
            points: points(&|e| Some(e.train_loss)),
        });
        val_series.push(Series {
            name: format!("seed {}", run.seed),
            points: points(&|e| e.val_macro_jaccard),
        });
    }
    dir.write("per_video.csv", per_video)?;
    line_chart(&dir.join("train_loss.svg"), "Training loss", "epoch", "loss", &loss_series)?;
    dir.register("train_loss.svg")?;
    if val_series.iter().any(|s| !s.points.is_empty()) {
        line_chart(&dir.join("val_jaccard.svg"), "Validation Macro Jaccard", "epoch", "Macro Jaccard", &val_series)?;
        dir.register("val_jaccard.svg")?;
    }
    Ok(())
}
