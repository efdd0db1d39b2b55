use std::path::{Path, PathBuf};

use prognos_cli::run_from_args;

const SMALL_CONFIG: &str = r#"
seed = 5

[partition]
rotate = ["a", "b"]
test = ["c"]

[pathology]
combinations = ["cox-mean"]
n_trials = 2
cox_epochs = 50

[clinical]
n_trials = 2

[tiling]
patch_size = 8
mpp = 0.5

[synth]
cohorts = [
  { name = "a", n = 60 },
  { name = "b", n = 60 },
  { name = "c", n = 60 },
]
"#;

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, config).unwrap();
    (dir, path)
}

fn run(config: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["prognos", "--config", config.to_str().unwrap()];
    argv.extend_from_slice(args);
    run_from_args(argv)
}

#[test]
fn help_and_bad_flags() {
    assert_eq!(run_from_args(["prognos", "--help"]), 0);
    assert_eq!(run_from_args(["prognos", "--no-such-flag", "ingest"]), 2);
    assert_eq!(run_from_args(["prognos", "--endpoint", "XYZ", "ingest"]), 2);
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let (_dir, config) = setup("seed = 1\nunexpected = true\n");
    assert_eq!(run(&config, &["ingest"]), 2);
}

#[test]
fn stages_without_inputs_report_missing_artifacts() {
    let (_dir, config) = setup(SMALL_CONFIG);
    assert_eq!(run(&config, &["ingest"]), 4);
    assert_eq!(run(&config, &["train-clinical"]), 4);
    assert_eq!(run(&config, &["evaluate"]), 4);
    assert_eq!(run(&config, &["pool"]), 4);
}

#[test]
fn changed_config_needs_force_to_overwrite() {
    let (dir, config) = setup(SMALL_CONFIG);
    assert_eq!(run(&config, &["synth"]), 0);
    assert_eq!(run(&config, &["ingest"]), 0);
    let summary = dir.path().join("out/ingest/summary.tsv");
    let first = std::fs::read_to_string(&summary).unwrap();
    assert!(first.starts_with("# config_sha256="));
    assert!(first.lines().next().unwrap().ends_with("seed=5"));

    assert_eq!(run(&config, &["ingest"]), 0);
    assert_eq!(run(&config, &["--seed", "6", "ingest"]), 2);
    assert_eq!(std::fs::read_to_string(&summary).unwrap(), first);
    assert_eq!(run(&config, &["--seed", "6", "--force", "ingest"]), 0);
    assert!(std::fs::read_to_string(&summary).unwrap().lines().next().unwrap().ends_with("seed=6"));
}

#[test]
fn invalid_subgroup_is_rejected() {
    let (_dir, config) = setup(SMALL_CONFIG);
    assert_eq!(run(&config, &["--subgroup", "ER=", "ingest"]), 2);
    assert_eq!(run(&config, &["--subgroup", "color=blue", "ingest"]), 2);
}

fn write_pgm(path: &Path, width: usize, height: usize, f: impl Fn(usize, usize) -> u8) {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    for y in 0..height {
        for x in 0..width {
            bytes.push(f(x, y));
        }
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn tile_writes_patch_manifest() {
    let (dir, config) = setup(SMALL_CONFIG);
    let images = dir.path().join("images");
    std::fs::create_dir(&images).unwrap();
    write_pgm(&images.join("half.pgm"), 32, 32, |x, _| if x < 16 { 30 } else { 220 });
    write_pgm(&images.join("tiny.pgm"), 4, 4, |x, _| if x < 2 { 30 } else { 220 });
    assert_eq!(run(&config, &["tile"]), 0);
    let slides = std::fs::read_to_string(dir.path().join("out/tile/slides.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = slides.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "half");
    assert_eq!(rows[0][4], "8");
    assert_eq!(rows[0][5], "8");
    assert_eq!(rows[1][0], "tiny");
    assert_eq!(rows[1][6], "true");
}

#[test]
fn tile_without_images_is_missing_artifact() {
    let (_dir, config) = setup(SMALL_CONFIG);
    assert_eq!(run(&config, &["tile"]), 4);
}
