#![allow(dead_code)]

use std::path::Path;

use clap::Parser;
use i2e_cli::config::Config;
use i2e_cli::{pipeline, synth};

/// Runs the binary's entry point in-process.
pub fn cli(args: &[&str]) -> anyhow::Result<()> {
    let mut full = vec!["i2e"];
    full.extend_from_slice(args);
    i2e_cli::run(i2e_cli::Cli::parse_from(full))
}

/// Default config with `seed` applied everywhere.
pub fn config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.apply_seed(seed);
    cfg
}

/// Writes the synthetic world for `cfg` into `out` and runs the pipeline.
pub fn fixture(cfg: &Config, out: &Path) -> pipeline::PipelineOutput {
    synth::generate(&cfg.synth)
        .unwrap()
        .write(out, &cfg.synth)
        .unwrap();
    pipeline::run(cfg, out).unwrap()
}

/// Every regular file under `dir`, sorted, with its bytes.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}
