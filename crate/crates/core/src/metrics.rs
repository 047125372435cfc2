//! Video-wise phase recognition metrics and their aggregation over videos,
//! phases and repeated runs.
//!
//! Phase-wise scores of phase `p` are undefined for a video in which `p` is
//! not annotated; such entries are skipped by every mean.

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};

use crate::error::{Result, TunesError};

/// Hard predictions: argmax per row as 1-based labels, ties to the lower index.
pub fn argmax_labels(scores: ArrayView2<'_, f32>) -> Vec<u8> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            (best + 1) as u8
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoMetrics {
    pub num_frames: usize,
    pub accuracy: f64,
    /// Per phase (index `p-1`); `None` when `p` is not annotated.
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    pub jaccard: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
}

fn defined_mean(values: &[Option<f64>]) -> f64 {
    let (sum, n) = values
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl VideoMetrics {
    /// Metrics from a confusion matrix (rows: ground truth, columns: prediction).
    pub fn from_confusion(confusion: &Array2<u64>) -> Self {
        let c = confusion.nrows();
        let total: u64 = confusion.sum();
        let correct: u64 = (0..c).map(|p| confusion[[p, p]]).sum();
        let mut out = Self {
            num_frames: total as usize,
            accuracy: ratio(correct, total),
            precision: vec![None; c],
            recall: vec![None; c],
            jaccard: vec![None; c],
            f1: vec![None; c],
        };
        for p in 0..c {
            let annotated: u64 = confusion.row(p).sum();
            if annotated == 0 {
                continue;
            }
            let predicted: u64 = confusion.column(p).sum();
            let tp = confusion[[p, p]];
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, annotated);
            out.precision[p] = Some(precision);
            out.recall[p] = Some(recall);
            out.jaccard[p] = Some(ratio(tp, annotated + predicted - tp));
            out.f1[p] = Some(harmonic(precision, recall));
        }
        out
    }

    pub fn num_classes(&self) -> usize {
        self.jaccard.len()
    }

    pub fn macro_precision(&self) -> f64 {
        defined_mean(&self.precision)
    }

    pub fn macro_recall(&self) -> f64 {
        defined_mean(&self.recall)
    }

    pub fn macro_jaccard(&self) -> f64 {
        defined_mean(&self.jaccard)
    }

    /// Mean of the phase-wise F1 scores.
    pub fn macro_f1(&self) -> f64 {
        defined_mean(&self.f1)
    }

    /// Harmonic mean of macro precision and macro recall.
    pub fn harmonic_f1(&self) -> f64 {
        harmonic(self.macro_precision(), self.macro_recall())
    }
}

fn check_pair(truth: &[u8], pred: &[u8], num_classes: usize) -> Result<()> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(TunesError::shape(format!(
            "{} labels vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    for seq in [truth, pred] {
        if let Some(index) = seq.iter().position(|&l| l == 0 || usize::from(l) > num_classes) {
            return Err(TunesError::LabelOutOfRange {
                label: seq[index],
                num_classes,
                index,
            });
        }
    }
    Ok(())
}

pub fn confusion_matrix(truth: &[u8], pred: &[u8], num_classes: usize) -> Result<Array2<u64>> {
    check_pair(truth, pred, num_classes)?;
    let mut m = Array2::zeros((num_classes, num_classes));
    for (&y, &p) in truth.iter().zip(pred) {
        m[[usize::from(y) - 1, usize::from(p) - 1]] += 1;
    }
    Ok(m)
}

pub fn video_metrics(truth: &[u8], pred: &[u8], num_classes: usize) -> Result<VideoMetrics> {
    Ok(VideoMetrics::from_confusion(&confusion_matrix(truth, pred, num_classes)?))
}

/// Harmonic mean of the mean video-wise macro precision and recall.
pub fn f1_score(videos: &[VideoMetrics]) -> Result<f64> {
    if videos.is_empty() {
        return Err(TunesError::param("f1_score needs at least one video"));
    }
    let n = videos.len() as f64;
    let p = videos.iter().map(VideoMetrics::macro_precision).sum::<f64>() / n;
    let r = videos.iter().map(VideoMetrics::macro_recall).sum::<f64>() / n;
    Ok(harmonic(p, r))
}

/// Tolerance window around transitions, in frames.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedTolerance {
    pub frames: usize,
    /// Overrides for specific `(from, to)` transitions.
    pub per_transition: HashMap<(u8, u8), usize>,
}

impl Default for RelaxedTolerance {
    fn default() -> Self {
        Self {
            frames: 10,
            per_transition: HashMap::new(),
        }
    }
}

impl RelaxedTolerance {
    pub fn frames(frames: usize) -> Self {
        Self {
            frames,
            per_transition: HashMap::new(),
        }
    }

    pub fn for_transition(&self, from: u8, to: u8) -> usize {
        self.per_transition.get(&(from, to)).copied().unwrap_or(self.frames)
    }
}

/// Predictions with tolerated boundary errors replaced by the ground truth.
///
/// For a transition `a → b` at frame `t0`, frames `t0 .. t0+tol` labelled `b`
/// but predicted `a` and frames `t0-tol .. t0` labelled `a` but predicted `b`
/// count as correct.
pub fn relax_predictions(truth: &[u8], pred: &[u8], tolerance: &RelaxedTolerance) -> Vec<u8> {
    let mut out = pred.to_vec();
    let n = truth.len();
    for t0 in crate::data::transitions(truth) {
        let (a, b) = (truth[t0 - 1], truth[t0]);
        let tol = tolerance.for_transition(a, b);
        for t in t0..(t0 + tol).min(n) {
            if truth[t] == b && pred[t] == a {
                out[t] = b;
            }
        }
        for t in t0.saturating_sub(tol)..t0 {
            if truth[t] == a && pred[t] == b {
                out[t] = a;
            }
        }
    }
    out
}

pub fn relaxed_metrics(truth: &[u8], pred: &[u8], num_classes: usize, tolerance: &RelaxedTolerance) -> Result<VideoMetrics> {
    check_pair(truth, pred, num_classes)?;
    video_metrics(truth, &relax_predictions(truth, pred, tolerance), num_classes)
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// One aggregated metric.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub metric: String,
    /// Mean over runs of the mean over videos.
    pub mean: f64,
    /// Standard deviation over videos, averaged over runs.
    pub sd_videos: f64,
    /// Standard deviation over phases, averaged over runs (phase-wise metrics).
    pub sd_phases: Option<f64>,
    /// Standard deviation of the per-run means.
    pub sd_runs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AggregateReport {
    pub rows: Vec<AggregateRow>,
}

pub const CSV_HEADER: &str = "metric,statistic,value";

type PhaseField = fn(&VideoMetrics) -> &[Option<f64>];

impl AggregateReport {
    pub fn get(&self, metric: &str) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    /// Prepends `prefix` to every metric name.
    pub fn with_prefix(mut self, prefix: &str) -> Self {
        for r in &mut self.rows {
            r.metric = format!("{prefix}{}", r.metric);
        }
        self
    }

    pub fn extend(&mut self, other: AggregateReport) {
        self.rows.extend(other.rows);
    }

    /// `metric,statistic,value` lines with statistics M, SD_V, SD_P, SD_R.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},M,{}", r.metric, r.mean);
            let _ = writeln!(out, "{},SD_V,{}", r.metric, r.sd_videos);
            if let Some(sd) = r.sd_phases {
                let _ = writeln!(out, "{},SD_P,{}", r.metric, sd);
            }
            let _ = writeln!(out, "{},SD_R,{}", r.metric, r.sd_runs);
        }
        out
    }
}

fn video_level_row(metric: &str, runs: &[Vec<VideoMetrics>], f: impl Fn(&VideoMetrics) -> f64, phases: Option<PhaseField>) -> AggregateRow {
    let per_run: Vec<Vec<f64>> = runs.iter().map(|r| r.iter().map(&f).collect()).collect();
    let run_means: Vec<f64> = per_run.iter().map(|v| mean(v)).collect();
    let sd_videos = mean(&per_run.iter().map(|v| sample_sd(v)).collect::<Vec<_>>());
    let sd_phases = phases.map(|field| {
        let sds: Vec<f64> = runs
            .iter()
            .map(|videos| {
                let c = videos.first().map_or(0, VideoMetrics::num_classes);
                let phase_means: Vec<f64> = (0..c)
                    .filter_map(|p| {
                        let vals: Vec<f64> = videos.iter().filter_map(|v| field(v)[p]).collect();
                        (!vals.is_empty()).then(|| mean(&vals))
                    })
                    .collect();
                sample_sd(&phase_means)
            })
            .collect();
        mean(&sds)
    });
    AggregateRow {
        metric: metric.to_string(),
        mean: mean(&run_means),
        sd_videos,
        sd_phases,
        sd_runs: sample_sd(&run_means),
    }
}

/// Aggregates per-video metrics of several runs over the same videos.
pub fn aggregate(runs: &[Vec<VideoMetrics>]) -> Result<AggregateReport> {
    let videos = runs.first().map_or(0, Vec::len);
    if videos == 0 || runs.iter().any(|r| r.len() != videos) {
        return Err(TunesError::param(
            "aggregate needs a non-empty, rectangular list of runs",
        ));
    }
    let rows = vec![
        video_level_row("accuracy", runs, |v| v.accuracy, None),
        video_level_row("precision", runs, VideoMetrics::macro_precision, Some(|v| &v.precision)),
        video_level_row("recall", runs, VideoMetrics::macro_recall, Some(|v| &v.recall)),
        video_level_row("jaccard", runs, VideoMetrics::macro_jaccard, Some(|v| &v.jaccard)),
        video_level_row("f1", runs, VideoMetrics::macro_f1, Some(|v| &v.f1)),
        video_level_row("f1_harmonic", runs, VideoMetrics::harmonic_f1, None),
    ];
    Ok(AggregateReport { rows })
}
