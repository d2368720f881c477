mod common;

use std::path::Path;

use common::cli;
use i2e_cli::config::{files, Config};
use i2e_cli::experiment::{self, Axis, Data};
use i2e_cli::io::partial_path;
use i2e_core::curator::I2EExample;

const SMALL: &str = r#"
[synth]
entities = 40
topics = 8
images_per_entity = 12
heldout_per_entity = 3

[trainer]
batch_size = 32
num_sampled_classes = 40
warmup_steps = 10
total_steps = 60

[eval.probe]
epochs = [5, 10]
learning_rates = [0.1, 0.01]
"#;

fn setup(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn out_arg(dir: &Path) -> &str {
    dir.to_str().unwrap()
}

#[test]
fn full_run_validates_and_corruption_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    for cmd in ["synth", "pipeline", "train", "eval"] {
        cli(&[
            "--config",
            &cfg,
            "--out",
            out_arg(dir.path()),
            "--seed",
            "3",
            cmd,
        ])
        .unwrap();
    }
    for f in [
        files::I2E,
        files::LEDGER,
        files::CHECKPOINT,
        files::METRICS,
        files::REPORT,
        files::PER_QUERY,
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
        assert!(!partial_path(&dir.path().join(f)).exists());
    }
    let metrics = std::fs::read_to_string(dir.path().join(files::METRICS)).unwrap();
    assert_eq!(metrics.lines().count(), 61);
    cli(&["--config", &cfg, "--out", out_arg(dir.path()), "validate"]).unwrap();

    let i2e_path = dir.path().join(files::I2E);
    let mut rows = I2EExample::load(&i2e_path).unwrap();
    rows[0].entity_labels[0].1 = 0.01;
    std::fs::write(&i2e_path, I2EExample::to_tsv(&rows)).unwrap();
    assert!(cli(&["--config", &cfg, "--out", out_arg(dir.path()), "validate"]).is_err());
}

#[test]
fn threshold_above_one_empties_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "\n[curator]\nentity_threshold = 1.01\n");
    cli(&["--config", &cfg, "--out", out_arg(dir.path()), "synth"]).unwrap();
    cli(&["--config", &cfg, "--out", out_arg(dir.path()), "pipeline"]).unwrap();
    assert!(I2EExample::load(dir.path().join(files::I2E))
        .unwrap()
        .is_empty());
    let ledger: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(files::LEDGER)).unwrap())
            .unwrap();
    assert_eq!(ledger["score_entities"]["examples"]["retained"], 0);
    let err = cli(&["--config", &cfg, "--out", out_arg(dir.path()), "train"]).unwrap_err();
    assert!(format!("{err:#}").contains("empty"), "{err:#}");
    assert!(!dir.path().join(files::CHECKPOINT).exists());
}

#[test]
fn entity_sweep_covering_everything_matches_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let path = setup(dir.path(), "");
    let mut cfg = Config::load(Some(Path::new(&path))).unwrap();
    cfg.apply_seed(5);
    common::fixture(&cfg, dir.path());
    let data = Data::load(&cfg, dir.path()).unwrap();
    let (state, _) = experiment::train_model(&cfg, &data, &data.i2e).unwrap();
    let baseline = experiment::evaluate_model(&cfg, &data, &state).unwrap();
    let rows = experiment::ablate(&cfg, &data, Axis::Entities, &[10_000]).unwrap();
    assert_eq!(rows[0].report.metrics, baseline.metrics);
}

#[test]
fn negatives_sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    cli(&["--config", &cfg, "--out", out_arg(dir.path()), "synth"]).unwrap();
    cli(&["--config", &cfg, "--out", out_arg(dir.path()), "pipeline"]).unwrap();
    cli(&[
        "--config",
        &cfg,
        "--out",
        out_arg(dir.path()),
        "ablate",
        "--axis",
        "negatives",
        "--values",
        "32,40",
    ])
    .unwrap();
    let csv = std::fs::read_to_string(dir.path().join(files::ABLATION)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "axis_value,map_all,recall1,recall5,knn_acc,probe_acc,zs_acc"
    );
    assert!(lines[1].starts_with("32,") && lines[2].starts_with("40,"));
    assert_eq!(lines.len(), 3);
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let out = out_arg(dir.path());
    assert!(cli(&[
        "--config",
        &cfg,
        "--out",
        out,
        "ablate",
        "--axis",
        "negatives"
    ])
    .is_err());
    assert!(cli(&["--config", &cfg, "--out", out, "ablate"]).is_err());
    assert!(cli(&["--config", &cfg, "--out", out, "--shards", "0", "synth"]).is_err());
    assert!(cli(&["--out", out, "pipeline"]).is_err());
    assert!(cli(&["--config", "/nonexistent/run.toml", "synth"]).is_err());
}

#[test]
fn seed_changes_the_fixture() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cli(&["--out", out_arg(a.path()), "--seed", "1", "synth"]).unwrap();
    cli(&["--out", out_arg(b.path()), "--seed", "2", "synth"]).unwrap();
    let read = |d: &Path| std::fs::read(d.join(files::FEATURES)).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
}
