//! Inference latency and memory benchmark.
//!
//! For every model configuration and sequence length: warm-up passes, then
//! timed forward passes on random features. Peak working memory of one
//! forward pass comes from [`PeakAlloc`] when it is installed as the global
//! allocator, and from the process high-water mark otherwise.

use std::alloc::{GlobalAlloc, Layout, System};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tunes::metrics::sample_sd;
use tunes::{TunesConfig, TunesModel};

use crate::error::Result;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// Allocator wrapper that tracks live and peak heap bytes.
pub struct PeakAlloc;

unsafe impl GlobalAlloc for PeakAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            record_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            record_alloc(layout.size());
        }
        p
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            record_alloc(new_size);
        }
        p
    }
}

fn record_alloc(size: usize) {
    ACTIVE.store(true, Ordering::Relaxed);
    let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

/// Whether [`PeakAlloc`] is the global allocator of this process.
pub fn tracking_allocator_active() -> bool {
    let probe = vec![0u8; 64];
    std::hint::black_box(&probe);
    ACTIVE.load(Ordering::Relaxed)
}

/// Peak heap bytes above the level at the start of `f`.
fn heap_peak_during<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    (out, PEAK.load(Ordering::Relaxed).saturating_sub(base))
}

fn proc_status_kib(field: &str) -> Option<usize> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find(|l| l.starts_with(field))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

/// Resident-set high-water mark increase during `f`, in bytes (Linux).
fn rss_peak_during<T>(f: impl FnOnce() -> T) -> (T, Option<usize>) {
    // writing 5 resets the high-water mark to the current RSS
    let reset = std::fs::write("/proc/self/clear_refs", "5").is_ok();
    let before = proc_status_kib("VmRSS:");
    let out = f();
    let after = proc_status_kib("VmHWM:");
    let delta = match (reset, before, after) {
        (true, Some(b), Some(a)) => Some(a.saturating_sub(b) * 1024),
        _ => None,
    };
    (out, delta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub warmup: usize,
    pub repetitions: usize,
    /// Skip a point when one forward pass needs more heap than this.
    pub memory_limit: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![450, 900, 1800, 3600, 7200],
            warmup: 100,
            repetitions: 1000,
            memory_limit: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BenchStatus {
    Ok,
    /// Exceeded the memory limit or failed to allocate.
    OutOfMemory,
    Failed(String),
}

impl BenchStatus {
    fn label(&self) -> String {
        match self {
            BenchStatus::Ok => "ok".into(),
            BenchStatus::OutOfMemory => "oom".into(),
            BenchStatus::Failed(m) => format!("failed: {}", m.replace(',', ";")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub model: String,
    pub len: usize,
    pub parameters: usize,
    pub latency_mean_ms: f64,
    pub latency_sd_ms: f64,
    pub repetitions: usize,
    pub peak_memory_bytes: usize,
    pub status: BenchStatus,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchRow>,
}

impl BenchmarkReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,length,parameters,latency_mean_ms,latency_sd_ms,repetitions,peak_memory_bytes,status\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.model,
                r.len,
                r.parameters,
                r.latency_mean_ms,
                r.latency_sd_ms,
                r.repetitions,
                r.peak_memory_bytes,
                r.status.label()
            ));
        }
        out
    }

    pub fn rows_for<'a>(&'a self, model: &'a str) -> impl Iterator<Item = &'a BenchRow> + 'a {
        self.rows.iter().filter(move |r| r.model == model)
    }
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

/// Measures one model at one length.
pub fn measure(name: &str, model: &TunesModel, len: usize, config: &BenchConfig) -> BenchRow {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ len as u64);
    let features = Array2::from_shape_simple_fn((len, model.config().input_dim), || rng.gen_range(-1.0f32..1.0));
    let mut row = BenchRow {
        model: name.to_string(),
        len,
        parameters: model.count_parameters(),
        latency_mean_ms: f64::NAN,
        latency_sd_ms: f64::NAN,
        repetitions: 0,
        peak_memory_bytes: 0,
        status: BenchStatus::Ok,
    };
    let forward = || model.forward(&features).map(|p| std::hint::black_box(p.levels.len()));

    // one pass to measure memory before committing to the timed loop
    let probe = catch_unwind(AssertUnwindSafe(|| {
        if tracking_allocator_active() {
            let (r, peak) = heap_peak_during(forward);
            (r, Some(peak))
        } else {
            rss_peak_during(forward)
        }
    }));
    match probe {
        Ok((Ok(_), peak)) => row.peak_memory_bytes = peak.unwrap_or(0),
        Ok((Err(e), _)) => {
            row.status = BenchStatus::Failed(e.to_string());
            return row;
        }
        Err(e) => {
            row.status = BenchStatus::Failed(panic_message(e));
            return row;
        }
    }
    if config.memory_limit.is_some_and(|limit| row.peak_memory_bytes > limit) {
        row.status = BenchStatus::OutOfMemory;
        return row;
    }
    for _ in 0..config.warmup {
        let _ = forward();
    }
    let mut times = Vec::with_capacity(config.repetitions);
    for _ in 0..config.repetitions {
        let start = Instant::now();
        let _ = forward();
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    row.repetitions = times.len();
    if !times.is_empty() {
        row.latency_mean_ms = times.iter().sum::<f64>() / times.len() as f64;
        row.latency_sd_ms = sample_sd(&times);
    }
    row
}

/// Runs every `(name, config)` pair at every length. Models are built by the
/// same constructor used for training.
pub fn benchmark(models: &[(String, TunesConfig)], config: &BenchConfig) -> Result<BenchmarkReport> {
    let mut report = BenchmarkReport::default();
    for (name, model_config) in models {
        let model = crate::build_model(model_config)?;
        for &len in &config.lengths {
            report.rows.push(measure(name, &model, len, config));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TunesConfig {
        TunesConfig {
            input_dim: 16,
            dim: 8,
            head_dim: 8,
            ffn_dim: 16,
            ..TunesConfig::online()
        }
    }

    #[test]
    fn report_has_sd_columns_and_counts() {
        let config = BenchConfig {
            lengths: vec![36, 72],
            warmup: 1,
            repetitions: 3,
            ..BenchConfig::default()
        };
        let report = benchmark(&[("online".into(), small())], &config).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows.iter().all(|r| r.repetitions == 3 && r.status == BenchStatus::Ok));
        assert!(report.to_csv().starts_with("model,length,parameters,latency_mean_ms,latency_sd_ms"));
    }

    #[test]
    fn memory_limit_records_oom() {
        let config = BenchConfig {
            lengths: vec![72],
            warmup: 0,
            repetitions: 1,
            memory_limit: Some(0),
            ..BenchConfig::default()
        };
        let model = TunesModel::new(small()).unwrap();
        let row = measure("online", &model, 72, &config);
        // without a tracking allocator the RSS probe may report zero growth
        if row.peak_memory_bytes > 0 {
            assert_eq!(row.status, BenchStatus::OutOfMemory);
        }
    }

    #[test]
    fn bad_length_is_a_failed_point() {
        let model = TunesModel::new(small()).unwrap();
        let row = measure("online", &model, 35, &BenchConfig::default());
        assert!(matches!(row.status, BenchStatus::Failed(_)));
    }
}
