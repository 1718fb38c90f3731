use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[dataset]
seed = 2

[dataset.params]
nodes = 60
feature_dim = 6
depth = 2
num_trees = 20
depths = [2, 3]

[model]
hidden = 8

[train]
epochs = 5
seeds = [0, 1]
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnlipkit"))
        .args(args)
        .env("ATTNLIPKIT_THREADS", "1")
        .output()
        .unwrap()
}

fn run_in(dir: &Path, sub: &str, extra: &[&str]) -> Output {
    let cfg = dir.join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.join("out");
    let mut args = vec![sub, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

/// Every artifact except the resolved config, keyed by its path below `root`.
fn artifacts(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else if p.file_name().unwrap() != "resolved_config.toml" {
                acc.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

fn deterministic(sub: &str, extra: &[&str]) -> BTreeMap<String, Vec<u8>> {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_in(a.path(), sub, extra);
    let rb = run_in(b.path(), sub, extra);
    assert_eq!(ra.status.code(), rb.status.code());
    assert!(ra.status.code().unwrap() <= 1, "{sub}: {}", String::from_utf8_lossy(&ra.stderr));
    assert!(a.path().join("out/resolved_config.toml").exists());
    let (fa, fb) = (artifacts(&a.path().join("out")), artifacts(&b.path().join("out")));
    assert!(!fa.is_empty(), "{sub} wrote nothing");
    assert_eq!(fa, fb, "{sub} artifacts differ between runs");
    fa
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--normalization", "sideways"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));
}

#[test]
fn verify_bounds_passes_and_is_deterministic() {
    let files = deterministic("verify-bounds", &["--samples", "20"]);
    let csv = String::from_utf8(files["bounds.csv"].clone()).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn calibrate_is_deterministic() {
    let files = deterministic("calibrate", &["--target-eta", "0.7"]);
    let csv = String::from_utf8(files["calibration.csv"].clone()).unwrap();
    assert!(csv.starts_with("node,degree,status,c,eta_before,achieved_eta,evaluations\n"));
    assert_eq!(csv.lines().count(), 61);
}

#[test]
fn gen_trees_is_deterministic() {
    let files = deterministic("gen-trees", &[]);
    assert!(files.contains_key("trees-depth2.graph.txt"));
}

#[test]
fn train_writes_one_log_per_seed() {
    let files = deterministic("train", &["--normalization", "lip"]);
    assert!(files.keys().any(|k| k.ends_with("train_log.csv") && k.contains("seed-0")));
    assert!(files.keys().any(|k| k.ends_with("train_log.csv") && k.contains("seed-1")));
    assert!(files.contains_key("summary.json"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_in(dir.path(), "train", &["--seed", "7"]).status.success());
    let resolved = fs::read_to_string(dir.path().join("out/resolved_config.toml")).unwrap();
    assert!(resolved.contains("seeds = [7]"), "{resolved}");
    let files = artifacts(&dir.path().join("out"));
    assert!(files.keys().any(|k| k.contains("seed-7")));
}

#[test]
fn gradient_flow_compare_emits_both_runs() {
    let files = deterministic("gradient-flow", &["--compare", "--layers", "3"]);
    for seed in [0, 1] {
        for label in ["none", "lip"] {
            let key = Path::new(&format!("seed-{seed}")).join(format!("grad_flow_{label}.csv")).display().to_string();
            let csv = String::from_utf8(files[&key].clone()).unwrap();
            assert_eq!(csv.lines().count(), 1 + 3 * 5);
        }
    }
}

#[test]
fn trees_experiment_is_deterministic() {
    let files = deterministic("trees-experiment", &["--epochs", "3"]);
    let csv = String::from_utf8(files["trees.csv"].clone()).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
}

#[test]
fn entropy_training_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), "train", &["--normalization", "entropy", "--target-eta", "0.6", "--epochs", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
