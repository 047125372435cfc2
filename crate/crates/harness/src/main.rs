use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tunes::data::format::read_sequence;
use tunes::data::manifest::{Manifest, Split};
use tunes::data::synth::generate;
use tunes::kv::KvMap;
use tunes::metrics::aggregate;
use tunes::model::Mode;
use tunes::TunesConfig;
use tunes_harness::ablation::Ablation;
use tunes_harness::audit::{audit_causality, AuditConfig};
use tunes_harness::bench::{benchmark, BenchConfig, PeakAlloc};
use tunes_harness::config::{load_kv, synth_from_kv, ExperimentConfig};
use tunes_harness::experiment::{evaluate, run_experiment, write_experiment, Dataset, RunDir};
use tunes_harness::plot::{line_chart, Series};
use tunes_harness::{build_model, HarnessError, Result};

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc;

#[derive(Parser)]
#[command(name = "tunes", version, about = "Temporal U-Net phase segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set epochs=10 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<KvMap> {
        load_kv(self.config.as_deref(), &self.overrides)
    }

    fn record(&self, dir: &mut RunDir) -> Result<()> {
        if let Some(path) = &self.config {
            dir.input(path)?;
        }
        if !self.overrides.is_empty() {
            dir.note("overrides", self.overrides.join(" "));
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phase-labelled dataset with a manifest
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        train: usize,
        #[arg(long, default_value_t = 5)]
        val: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train one model per seed and evaluate on the test split
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on the test split
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        relaxed_tolerance: usize,
    },
    /// Inference latency and peak memory over sequence lengths
    Benchmark {
        #[arg(long)]
        out: PathBuf,
        /// Modes to benchmark, built from the configuration
        #[arg(long, value_delimiter = ',', default_value = "online,offline")]
        modes: Vec<Mode>,
        #[arg(long, value_delimiter = ',', default_values_t = [450, 900, 1800, 3600, 7200])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        warmup: usize,
        #[arg(long, default_value_t = 1000)]
        repetitions: usize,
        /// Record a point as out-of-memory above this many bytes per forward pass
        #[arg(long)]
        memory_limit: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Check that online predictions never depend on future frames
    AuditCausality {
        #[arg(long, default_value_t = 72)]
        len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace the downsampling of this encoder stage with an acausal one
        #[arg(long, value_name = "STAGE")]
        inject_acausal_downsample: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run ablation variants of one configuration
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Variants: full, no-transformer-conv, no-masking, no-augmentation,
        /// conv-only, no-mask-alternation, blocks-N (default: all)
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth { out, train, val, config } => synth(&out, train, val, &config),
        Command::Train { manifest, out, config } => train_cmd(&manifest, &out, &config),
        Command::Eval {
            manifest,
            checkpoint,
            out,
            relaxed_tolerance,
        } => eval(&manifest, &checkpoint, &out, relaxed_tolerance),
        Command::Benchmark {
            out,
            modes,
            lengths,
            warmup,
            repetitions,
            memory_limit,
            config,
        } => {
            let bench = BenchConfig {
                lengths,
                warmup,
                repetitions,
                memory_limit,
                seed: 0,
            };
            benchmark_cmd(&out, &modes, &bench, &config)
        }
        Command::AuditCausality {
            len,
            seed,
            inject_acausal_downsample,
            config,
        } => audit(len, seed, inject_acausal_downsample, &config),
        Command::Ablate {
            manifest,
            out,
            variants,
            config,
        } => ablate(&manifest, &out, &variants, &config),
    }
}

fn synth(out: &Path, train: usize, val: usize, args: &ConfigArgs) -> Result<ExitCode> {
    let kv = args.load()?;
    let config = synth_from_kv(&kv)?;
    if train + val >= config.num_videos {
        return Err(HarnessError::Config(format!(
            "{train} train + {val} val videos leave no test videos out of {}",
            config.num_videos
        )));
    }
    let data = Dataset::split(generate(&config)?, train, val);
    let manifest = data.save(out)?;
    println!(
        "wrote {} train, {} val, {} test videos; manifest {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        manifest.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn experiment_config(kv: &KvMap) -> Result<ExperimentConfig> {
    let config = ExperimentConfig::from_kv(kv)?;
    config.train.validate()?;
    Ok(config)
}

fn train_cmd(manifest_path: &Path, out: &Path, args: &ConfigArgs) -> Result<ExitCode> {
    let config = experiment_config(&args.load()?)?;
    let manifest = Manifest::load(manifest_path)?;
    let data = Dataset::load(&manifest, config.model.num_classes)?;
    let mut dir = RunDir::create(out, "train")?;
    args.record(&mut dir)?;
    dir.input(manifest_path)?;
    let result = run_experiment(&data, &config)?;
    write_experiment(&result, &config, &mut dir)?;
    dir.finish()?;
    print!("{}", result.report.to_csv());
    Ok(ExitCode::SUCCESS)
}

fn eval(manifest_path: &Path, checkpoint: &Path, out: &Path, tolerance: usize) -> Result<ExitCode> {
    let (model, _) = tunes::checkpoint::load(checkpoint)?;
    let manifest = Manifest::load(manifest_path)?;
    let test = manifest
        .require(Split::Test)?
        .into_iter()
        .map(|p| read_sequence(p, model.config().num_classes).map_err(HarnessError::from))
        .collect::<Result<Vec<_>>>()?;
    let (strict, relaxed) = evaluate(&model, &test, &tunes::metrics::RelaxedTolerance::frames(tolerance))?;
    let mut report = aggregate(&[strict])?;
    report.extend(aggregate(&[relaxed])?.with_prefix("R-"));
    let mut dir = RunDir::create(out, "eval")?;
    dir.input(manifest_path)?;
    dir.input(checkpoint)?;
    dir.note("relaxed_tolerance", tolerance.to_string());
    dir.write("metrics.csv", report.to_csv())?;
    dir.finish()?;
    print!("{}", report.to_csv());
    Ok(ExitCode::SUCCESS)
}

fn benchmark_cmd(out: &Path, modes: &[Mode], bench: &BenchConfig, args: &ConfigArgs) -> Result<ExitCode> {
    let kv = args.load()?;
    let mut models = Vec::new();
    for mode in modes {
        let mut mode_kv = kv.clone();
        mode_kv.set("mode", mode.to_string());
        models.push((mode.to_string(), TunesConfig::from_kv(&mode_kv)?));
    }
    let report = benchmark(&models, bench)?;
    let mut dir = RunDir::create(out, "benchmark")?;
    args.record(&mut dir)?;
    dir.note("warmup", bench.warmup.to_string());
    dir.note("repetitions", bench.repetitions.to_string());
    dir.write("benchmark.csv", report.to_csv())?;
    for (file, title, y_label, value) in [
        ("latency.svg", "Inference latency", "latency (ms)", 0),
        ("memory.svg", "Peak working memory", "memory (MiB)", 1),
    ] {
        let series: Vec<Series> = models
            .iter()
            .map(|(name, config)| Series {
                name: format!("{name} ({} params)", build_model(config).map(|m| m.count_parameters()).unwrap_or(0)),
                points: report
                    .rows_for(name)
                    .map(|r| {
                        let y = if value == 0 {
                            r.latency_mean_ms
                        } else {
                            r.peak_memory_bytes as f64 / (1024.0 * 1024.0)
                        };
                        (r.len as f64, y)
                    })
                    .collect(),
            })
            .collect();
        line_chart(&dir.join(file), title, "sequence length (frames)", y_label, &series)?;
        dir.register(file)?;
    }
    dir.finish()?;
    print!("{}", report.to_csv());
    Ok(ExitCode::SUCCESS)
}

fn audit(len: usize, seed: u64, inject: Option<usize>, args: &ConfigArgs) -> Result<ExitCode> {
    let config = TunesConfig::from_kv(&args.load()?)?;
    let mut model = build_model(&config)?;
    if let Some(stage) = inject {
        let path = model.force_acausal_downsample(stage)?;
        println!("injected acausal downsampling at {path}");
    }
    let report = audit_causality(&model, &AuditConfig { len, seed })?;
    println!("{report}");
    Ok(if report.failed() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn ablate(manifest_path: &Path, out: &Path, variants: &[String], args: &ConfigArgs) -> Result<ExitCode> {
    let base = experiment_config(&args.load()?)?;
    let variants: Vec<Ablation> = if variants.is_empty() {
        Ablation::all()
    } else {
        variants.iter().map(|v| v.parse()).collect::<Result<_>>()?
    };
    let manifest = Manifest::load(manifest_path)?;
    let data = Dataset::load(&manifest, base.model.num_classes)?;
    let mut summary = String::from("variant,metric,statistic,value\n");
    let mut top = RunDir::create(out, "ablate")?;
    args.record(&mut top)?;
    top.input(manifest_path)?;
    for variant in variants {
        let config = variant.apply(&base);
        let result = run_experiment(&data, &config)?;
        let mut dir = RunDir::create(&out.join(variant.to_string()), "ablate")?;
        dir.note("variant", variant.to_string());
        dir.input(manifest_path)?;
        write_experiment(&result, &config, &mut dir)?;
        dir.finish()?;
        for line in result.report.to_csv().lines().skip(1) {
            summary.push_str(&format!("{variant},{line}\n"));
        }
        if let Some(row) = result.report.get("jaccard") {
            println!("{variant}: Macro Jaccard {:.4} (SD_R {:.4})", row.mean, row.sd_runs);
        }
    }
    top.write("ablation.csv", summary)?;
    top.finish()?;
    Ok(ExitCode::SUCCESS)
}
