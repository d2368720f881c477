//! Orchestration for the `i2e` binary: configuration, the synthetic
//! fixture, and one module per subcommand.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiment;
pub mod io;
pub mod pipeline;
pub mod synth;
pub mod validate;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use i2e_core::trainer::Recipe;

use crate::config::Config;
use crate::experiment::Axis;

#[derive(Debug, Parser)]
#[command(
    name = "i2e",
    version,
    about = "Build an image-to-entity dataset and train on it"
)]
pub struct Cli {
    /// TOML config; `I2E_<BLOCK>_<KEY>` variables override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every randomized stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker cap for parallel stages.
    #[arg(long, global = true)]
    pub shards: Option<usize>,
    /// Output directory; unset input paths are read from here too.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic knowledge base, graph, pairs, features and eval split.
    Synth,
    /// Filter pairs, link entities and build the curated dataset.
    Pipeline,
    /// Train an encoder on the curated dataset.
    Train {
        #[arg(long)]
        recipe: Option<Recipe>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        /// Defaults to `model.ckpt` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Retrain and evaluate along one axis.
    Ablate {
        #[arg(long, value_enum)]
        axis: Option<Axis>,
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
    },
    /// Check every artifact's invariants.
    Validate,
}

impl Cli {
    /// Loads the config and applies command-line settings on top.
    pub fn resolve_config(&self) -> Result<Config> {
        let mut cfg = Config::load(self.config.as_deref())?;
        let seed = self.seed.unwrap_or(cfg.run.seed);
        cfg.apply_seed(seed);
        if let Some(s) = self.shards {
            cfg.run.shards = s;
        }
        if let Command::Train { recipe: Some(r) } = &self.command {
            cfg.trainer.config.recipe = *r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = cli.resolve_config()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.shards)
        .build()?;
    pool.install(|| dispatch(&cli, &cfg))
}

fn dispatch(cli: &Cli, cfg: &Config) -> Result<()> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth => {
            let world = synth::generate(&cfg.synth)?;
            world.write(out, &cfg.synth)?;
            log::info!(
                "wrote {} entities, {} pairs, {} eval images to {}",
                world.kb.len(),
                world.pairs.len(),
                world.eval.len(),
                out.display()
            );
        }
        Command::Pipeline => {
            pipeline::run(cfg, out)?;
        }
        Command::Train { .. } => {
            experiment::run_train(cfg, out)?;
        }
        Command::Eval { checkpoint } => {
            experiment::run_eval(cfg, out, checkpoint.as_deref())?;
        }
        Command::Ablate { axis, values } => {
            let axis = match (axis, &cfg.ablate.axis) {
                (Some(a), _) => *a,
                (None, Some(s)) => s.parse()?,
                (None, None) => bail!("ablate needs --axis or ablate.axis"),
            };
            let values = if values.is_empty() {
                &cfg.ablate.values
            } else {
                values
            };
            experiment::run_ablate(cfg, out, axis, values)?;
        }
        Command::Validate => {
            let findings = validate::run(cfg, out);
            let mut bad = 0;
            for f in &findings {
                if f.ok() {
                    println!("ok\t{}", f.artifact);
                } else {
                    bad += 1;
                    for p in &f.problems {
                        println!("FAIL\t{}\t{p}", f.artifact);
                    }
                }
            }
            if bad > 0 {
                bail!("{bad} artifact(s) failed validation");
            }
        }
    }
    Ok(())
}
