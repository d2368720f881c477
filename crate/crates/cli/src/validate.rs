//! `validate`: re-reads every artifact present and checks its invariants.

use std::path::Path;

use anyhow::{Context, Result};
use i2e_core::curator::{validate_i2e, I2EExample, ImageTextPair};
use i2e_core::eval::EvalReport;
use i2e_core::hyperembed::{LinkGraph, PoincareEmbedding};
use i2e_core::kb::KnowledgeBase;
use i2e_core::store::VectorStore;
use i2e_core::trainer::{TrainerState, UNIT_NORM_TOLERANCE};

use crate::config::{files, Config};
use crate::io::EvalLabel;
use crate::pipeline::PipelineLedger;

/// Features are stored as f32, so unit norm holds only to single precision.
pub const STORED_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub artifact: String,
    pub problems: Vec<String>,
}

impl Finding {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

fn unit_norm_problems(
    store: &VectorStore,
    ids: impl IntoIterator<Item = String>,
    what: &str,
) -> Vec<String> {
    let mut problems = Vec::new();
    for id in ids {
        match store.get(&id) {
            None => problems.push(format!("{what} {id:?} has no feature")),
            Some(v) => {
                let n = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
                if (n - 1.0).abs() > STORED_NORM_TOLERANCE {
                    problems.push(format!("{what} {id:?} has norm {n}"));
                }
            }
        }
    }
    problems
}

fn check(artifact: &Path, f: impl FnOnce() -> Result<Vec<String>>) -> Finding {
    let problems = match f() {
        Ok(p) => p,
        Err(e) => vec![format!("{e:#}")],
    };
    Finding {
        artifact: artifact.display().to_string(),
        problems,
    }
}

/// Checks inputs (which must exist) and every pipeline, training and
/// evaluation output found in `out`.
pub fn run(cfg: &Config, out: &Path) -> Vec<Finding> {
    let mut found = Vec::new();
    let kb_path = cfg.paths.kb(out);
    let pairs_path = cfg.paths.pairs(out);
    let features_path = cfg.paths.features(out);
    let eval_path = cfg.paths.eval(out);
    let features = VectorStore::load(&features_path).ok();

    found.push(check(&kb_path, || {
        KnowledgeBase::load(&kb_path)
            .map(|_| vec![])
            .map_err(Into::into)
    }));
    if cfg.paths.entity_embeddings.is_none() {
        let graph = cfg.paths.graph(out);
        found.push(check(&graph, || {
            LinkGraph::load(&graph).map(|_| vec![]).map_err(Into::into)
        }));
    }
    found.push(check(&features_path, || {
        VectorStore::load(&features_path)?;
        Ok(vec![])
    }));
    found.push(check(&pairs_path, || {
        let pairs = ImageTextPair::load(&pairs_path)?;
        let store = features.as_ref().context("feature store unreadable")?;
        let mut p = unit_norm_problems(store, pairs.iter().map(|p| p.image_id.clone()), "image");
        p.extend(unit_norm_problems(
            store,
            pairs.iter().map(|p| p.feature_key.clone()),
            "text",
        ));
        Ok(p)
    }));
    found.push(check(&eval_path, || {
        let labels = EvalLabel::load(&eval_path)?;
        let store = features.as_ref().context("feature store unreadable")?;
        Ok(unit_norm_problems(
            store,
            labels.iter().map(|l| l.image_id.clone()),
            "image",
        ))
    }));

    let optional = |name: &str| Some(out.join(name)).filter(|p| p.exists());

    let emb_path = cfg
        .paths
        .entity_embeddings
        .clone()
        .or_else(|| optional(files::ENTITY_EMBEDDINGS));
    if let Some(p) = emb_path {
        found.push(check(&p, || {
            PoincareEmbedding::import(&p)?;
            Ok(vec![])
        }));
    }
    if let Some(p) = optional(files::I2E) {
        found.push(check(&p, || {
            let examples = I2EExample::load(&p)?;
            Ok(validate_i2e(&examples, cfg.curator.entity_threshold))
        }));
    }
    if let Some(p) = optional(files::LEDGER) {
        found.push(check(&p, || {
            let text = std::fs::read_to_string(&p)?;
            let ledger: PipelineLedger = serde_json::from_str(&text)?;
            Ok(ledger
                .unreconciled()
                .into_iter()
                .map(|s| format!("stage {s} does not reconcile"))
                .collect())
        }));
    }
    if let Some(p) = optional(files::CHECKPOINT) {
        found.push(check(&p, || {
            let state = TrainerState::load(&p)?;
            let mut problems = Vec::new();
            for (i, row) in state.class_weights.rows().into_iter().enumerate() {
                let n = row.dot(&row).sqrt();
                if (n - 1.0).abs() > UNIT_NORM_TOLERANCE.max(STORED_NORM_TOLERANCE) {
                    problems.push(format!("class row {i} has norm {n}"));
                }
            }
            Ok(problems)
        }));
    }
    if let Some(p) = optional(files::REPORT) {
        found.push(check(&p, || {
            let text = std::fs::read_to_string(&p)?;
            let report = EvalReport {
                metrics: serde_json::from_str(&text)?,
                per_query: vec![],
            };
            Ok(report
                .validate()
                .err()
                .map(|e| e.to_string())
                .into_iter()
                .collect())
        }));
    }
    if let Some(p) = optional(files::EMBEDDINGS) {
        found.push(check(&p, || {
            let store = VectorStore::load(&p)?;
            Ok(unit_norm_problems(
                &store,
                store.ids().to_vec(),
                "embedding",
            ))
        }));
    }
    found
}
