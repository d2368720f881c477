//! `pipeline`: filter pairs, link entities, score them against images, and
//! build the final dataset.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use i2e_core::curator::{
    build_i2e, filter_pairs, score_entities, BuildLedger, EntityHistogram, I2EExample,
    ImageTextPair, ScoreLedger, StageLedger,
};
use i2e_core::hyperembed::{train_embeddings, LinkGraph, PoincareEmbedding};
use i2e_core::kb::KnowledgeBase;
use i2e_core::linker::{link_corpus, LinkedPair};
use i2e_core::store::VectorStore;
use serde::{Deserialize, Serialize};

use crate::config::{files, Config};
use crate::io::Staged;

/// Linking counts; timing is logged but kept out of the ledger so reruns
/// compare byte for byte.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkCounts {
    pub records: usize,
    pub linked_spans: usize,
    pub empty_texts: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineLedger {
    pub filter_pairs: StageLedger,
    pub link: LinkCounts,
    pub score_entities: ScoreLedger,
    pub build_i2e: BuildLedger,
}

impl PipelineLedger {
    pub fn stages(&self) -> Vec<&StageLedger> {
        vec![
            &self.filter_pairs,
            &self.score_entities.assignments,
            &self.score_entities.examples,
            &self.build_i2e.entities,
            &self.build_i2e.examples,
        ]
    }

    /// Names of stages whose counts do not add up.
    pub fn unreconciled(&self) -> Vec<String> {
        self.stages()
            .into_iter()
            .filter(|s| !s.reconciles())
            .map(|s| s.stage.clone())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub i2e: Vec<I2EExample>,
    pub histogram: EntityHistogram,
    pub ledger: PipelineLedger,
}

fn entity_embeddings(cfg: &Config, out: &Path) -> Result<PoincareEmbedding> {
    if let Some(p) = &cfg.paths.entity_embeddings {
        return PoincareEmbedding::import(p).with_context(|| format!("loading {}", p.display()));
    }
    let graph_path = cfg.paths.graph(out);
    let graph = LinkGraph::load(&graph_path)
        .with_context(|| format!("loading {}", graph_path.display()))?;
    let (emb, report) = train_embeddings(&graph, &cfg.hyperembed)?;
    log::info!(
        "entity embeddings: {} nodes, {} updates, final loss {:.4}",
        emb.len(),
        report.updates,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(emb)
}

pub fn run(cfg: &Config, out: &Path) -> Result<PipelineOutput> {
    std::fs::create_dir_all(out)?;
    let kb_path = cfg.paths.kb(out);
    let kb =
        KnowledgeBase::load(&kb_path).with_context(|| format!("loading {}", kb_path.display()))?;
    let pairs_path = cfg.paths.pairs(out);
    let pairs = ImageTextPair::load(&pairs_path)
        .with_context(|| format!("loading {}", pairs_path.display()))?;
    let features_path = cfg.paths.features(out);
    let features = VectorStore::load(&features_path)
        .with_context(|| format!("loading {}", features_path.display()))?;
    let mut staged = Staged::new();

    // Link with the stored (f32) coordinates so the saved file reproduces
    // the linked output exactly.
    let store = entity_embeddings(cfg, out)
        .context("stage hyperembed")?
        .to_store();
    let emb = PoincareEmbedding::from_store(&store)?;
    staged.write(out.join(files::ENTITY_EMBEDDINGS), &store.encode())?;

    let (kept, filter_ledger, _) =
        filter_pairs(&pairs, &cfg.curator, &features).context("stage filter_pairs")?;
    let filtered: String = kept.iter().map(|p| p.to_line() + "\n").collect();
    let filtered_path = staged.stage(out.join(files::FILTERED));
    std::fs::write(&filtered_path, filtered)?;

    let linked_path = staged.stage(out.join(files::LINKED));
    let summary = link_corpus(
        &filtered_path,
        &linked_path,
        &kb,
        &emb,
        &cfg.linker,
        cfg.run.shards,
    )
    .context("stage link_corpus")?;
    log::info!(
        "linked {} texts ({} spans) in {:.2}s, {:.0} texts/s",
        summary.records,
        summary.linked_spans,
        summary.seconds,
        summary.texts_per_sec
    );
    let linked = LinkedPair::load(&linked_path).context("stage link_corpus")?;

    let (scored, score_ledger) = score_entities(&linked, &kb, &features, &features, &cfg.curator)
        .context("stage score_entities")?;
    let (i2e, histogram, build_ledger) =
        build_i2e(&scored, &cfg.curator).context("stage build_i2e")?;

    let ledger = PipelineLedger {
        filter_pairs: filter_ledger,
        link: LinkCounts {
            records: summary.records,
            linked_spans: summary.linked_spans,
            empty_texts: summary.empty_texts,
        },
        score_entities: score_ledger,
        build_i2e: build_ledger,
    };
    let bad = ledger.unreconciled();
    if !bad.is_empty() {
        bail!("ledger does not reconcile for stages {bad:?}");
    }
    staged.write(out.join(files::I2E), I2EExample::to_tsv(&i2e).as_bytes())?;
    staged.write(out.join(files::HISTOGRAM), histogram.to_tsv().as_bytes())?;
    let mut json = serde_json::to_string_pretty(&ledger)?;
    json.push('\n');
    staged.write(out.join(files::LEDGER), json.as_bytes())?;
    staged.commit()?;

    let entities: BTreeMap<&str, ()> = i2e
        .iter()
        .flat_map(|e| e.entity_labels.iter().map(|l| (l.0.as_str(), ())))
        .collect();
    log::info!(
        "built {} examples over {} entities",
        i2e.len(),
        entities.len()
    );
    Ok(PipelineOutput {
        i2e,
        histogram,
        ledger,
    })
}
