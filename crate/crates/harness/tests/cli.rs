//! End-to-end runs of the `tunes` binary on tiny settings.

use std::path::Path;
use std::process::{Command, Output};

use tunes_harness::config::{load_kv, ExperimentConfig};

fn tunes(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tunes"))
        .args(args)
        .output()
        .expect("run tunes binary")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY_MODEL: [&str; 8] = ["--set", "input_dim=4", "--set", "dim=8", "--set", "head_dim=8", "--set", "ffn_dim=16"];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    tunes(&refs)
}

fn synth(dir: &Path) -> String {
    let data = dir.join("data");
    ok(&tunes(&[
        "synth", "--out", data.to_str().unwrap(), "--train", "2", "--val", "1",
        "--set", "num_videos=4", "--set", "feature_dim=4", "--set", "min_len=42", "--set", "max_len=60",
    ]));
    data.join("manifest.txt").to_str().unwrap().to_string()
}

#[test]
fn synth_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path());
    let run_dir = tmp.path().join("run");
    let stdout = ok(&run(with(
        &["train", "--manifest", &manifest, "--out", run_dir.to_str().unwrap(), "--set", "epochs=2", "--set", "seeds=3,4"],
        &TINY_MODEL,
    )));
    assert!(stdout.starts_with("metric,statistic,value\n"));
    let listing = std::fs::read_to_string(run_dir.join("run_manifest.txt")).unwrap();
    for name in ["metrics.csv", "config.txt", "history_run1_seed4.csv", "model_run0_seed3.safetensors", "train_loss.svg"] {
        assert!(listing.contains(name), "{name} missing from\n{listing}");
    }
    assert!(listing.contains("seeds = 3,4"));

    let checkpoint = run_dir.join("model_run0_seed3.safetensors");
    let eval_dir = tmp.path().join("eval");
    let stdout = ok(&tunes(&[
        "eval", "--manifest", &manifest, "--checkpoint", checkpoint.to_str().unwrap(), "--out", eval_dir.to_str().unwrap(),
    ]));
    assert!(stdout.contains("R-jaccard,M,"));
}

#[test]
fn audit_exit_status_follows_outcome() {
    let clean = run(with(&["audit-causality", "--len", "36"], &TINY_MODEL));
    assert!(ok(&clean).contains("passed"));
    let broken = run(with(&["audit-causality", "--len", "36", "--inject-acausal-downsample", "0"], &TINY_MODEL));
    assert!(!broken.status.success());
    assert!(String::from_utf8_lossy(&broken.stdout).contains("encoder.0.down"));
    let offline = run(with(&["audit-causality", "--set", "mode=offline"], &TINY_MODEL));
    assert!(ok(&offline).contains("offline mode"));
}

#[test]
fn benchmark_writes_csv_and_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    let stdout = ok(&run(with(
        &["benchmark", "--out", out.to_str().unwrap(), "--lengths", "36,72", "--warmup", "1", "--repetitions", "2"],
        &TINY_MODEL,
    )));
    assert_eq!(stdout.lines().count(), 5);
    for f in ["benchmark.csv", "latency.svg", "memory.svg", "run_manifest.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn ablate_summarises_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path());
    let out = tmp.path().join("ablate");
    ok(&run(with(
        &["ablate", "--manifest", &manifest, "--out", out.to_str().unwrap(), "--variants", "full,conv-only,blocks-4", "--set", "epochs=1"],
        &TINY_MODEL,
    )));
    let summary = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(summary.starts_with("variant,metric,statistic,value\n"));
    for v in ["full,", "conv-only,", "blocks-4,"] {
        assert!(summary.contains(v), "{v}");
    }
    assert!(out.join("conv-only/run_manifest.txt").exists());
}

#[test]
fn bad_configuration_is_reported() {
    let out = tunes(&["audit-causality", "--set", "no_such_key=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let kv = load_kv(Some(&path), &[]).unwrap();
        let config = ExperimentConfig::from_kv(&kv).unwrap();
        assert_eq!(config.model.input_dim, 64, "{}", path.display());
        n += 1;
    }
    assert!(n >= 2);
}
