//! `train`, `eval` and `ablate`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use i2e_core::curator::{keep_top_entities, merge_i2t, I2EExample, ImageTextPair};
use i2e_core::eval::{
    evaluate, export_embeddings, EvalReport, EvalSplit, PromptFeatures, Templates, DEFAULT_TEMPLATE,
};
use i2e_core::kb::KnowledgeBase;
use i2e_core::store::VectorStore;
use i2e_core::trainer::{metrics_csv, train, MetricsRow, TrainCorpus, TrainerState};
use ndarray::Array2;

use crate::config::{files, Config};
use crate::io::{EvalLabel, Staged};

/// Inputs shared by training and evaluation.
pub struct Data {
    pub kb: KnowledgeBase,
    pub pairs: Vec<ImageTextPair>,
    pub features: VectorStore,
    pub i2e: Vec<I2EExample>,
    pub eval: Vec<EvalLabel>,
}

impl Data {
    pub fn load(cfg: &Config, out: &Path) -> Result<Self> {
        let kb_path = cfg.paths.kb(out);
        let pairs_path = cfg.paths.pairs(out);
        let features_path = cfg.paths.features(out);
        let i2e_path = out.join(files::I2E);
        let eval_path = cfg.paths.eval(out);
        Ok(Data {
            kb: KnowledgeBase::load(&kb_path)
                .with_context(|| format!("loading {}", kb_path.display()))?,
            pairs: ImageTextPair::load(&pairs_path)
                .with_context(|| format!("loading {}", pairs_path.display()))?,
            features: VectorStore::load(&features_path)
                .with_context(|| format!("loading {}", features_path.display()))?,
            i2e: I2EExample::load(&i2e_path).with_context(|| {
                format!("loading {} (run `pipeline` first)", i2e_path.display())
            })?,
            eval: EvalLabel::load(&eval_path)?,
        })
    }

    pub fn corpus(&self, cfg: &Config, i2e: &[I2EExample]) -> Result<TrainCorpus> {
        let merged = merge_i2t(
            i2e,
            &self.pairs,
            &self.kb,
            cfg.trainer.mix,
            cfg.trainer.config.seed,
        )?;
        Ok(TrainCorpus::from_examples(&merged, &self.features)?)
    }

    fn rows(&self, ids: &[String]) -> Result<Array2<f64>> {
        let mut m = Array2::zeros((ids.len(), self.features.dim()));
        for (i, id) in ids.iter().enumerate() {
            let v = self.features.require(id)?;
            m.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
        }
        Ok(m)
    }

    /// Curated images, each labeled with its highest-scoring entity.
    pub fn train_split(&self) -> Result<EvalSplit> {
        let mut ids = Vec::with_capacity(self.i2e.len());
        let mut labels = Vec::with_capacity(self.i2e.len());
        for e in &self.i2e {
            let best = e
                .entity_labels
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
                .with_context(|| format!("image {} has no labels", e.image_id))?;
            ids.push(e.image_id.clone());
            labels.push(best.0.clone());
        }
        Ok(EvalSplit {
            features: self.rows(&ids)?,
            ids,
            labels,
        })
    }

    pub fn test_split(&self) -> Result<EvalSplit> {
        let ids: Vec<String> = self.eval.iter().map(|l| l.image_id.clone()).collect();
        Ok(EvalSplit {
            features: self.rows(&ids)?,
            labels: self.eval.iter().map(|l| l.entity_id.clone()).collect(),
            ids,
        })
    }

    /// Prompt features for every class of the held-out split. A rendered
    /// prompt is looked up as a feature key first, then the entity id.
    pub fn prompts(&self, templates: &Templates) -> Result<PromptFeatures> {
        let class_ids: Vec<String> = self
            .eval
            .iter()
            .map(|l| l.entity_id.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut per_class = Vec::with_capacity(class_ids.len());
        for id in &class_ids {
            let name = self
                .kb
                .get(id)
                .map(|r| r.name.clone())
                .with_context(|| format!("eval entity {id} is not in the knowledge base"))?;
            let prompts = templates.render(&name);
            let mut m = Array2::zeros((prompts.len(), self.features.dim()));
            for (i, p) in prompts.iter().enumerate() {
                let v = self
                    .features
                    .get_f64(p)
                    .or_else(|| self.features.get_f64(id))
                    .with_context(|| format!("no text feature for prompt {p:?} or entity {id}"))?;
                m.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
            }
            per_class.push(m);
        }
        Ok(PromptFeatures {
            class_ids,
            per_class,
        })
    }
}

pub fn templates(cfg: &Config) -> Result<Templates> {
    if let Some(p) = &cfg.paths.templates {
        return Templates::load(p).with_context(|| format!("loading {}", p.display()));
    }
    let list = cfg
        .eval
        .templates
        .clone()
        .unwrap_or_else(|| vec![DEFAULT_TEMPLATE.to_string()]);
    Ok(Templates::new(list)?)
}

pub fn train_model(
    cfg: &Config,
    data: &Data,
    i2e: &[I2EExample],
) -> Result<(TrainerState, Vec<MetricsRow>)> {
    let corpus = data.corpus(cfg, i2e).context("building training corpus")?;
    log::info!(
        "training {} on {} examples, {} classes",
        cfg.trainer.config.recipe,
        corpus.len(),
        corpus.classes.len()
    );
    let (state, log) = train(&corpus, &cfg.trainer.config)?;
    if let Some(last) = log.last() {
        log::info!(
            "step {} loss {:.4} tau {:.4}",
            last.step,
            last.loss_total,
            last.tau
        );
    }
    Ok((state, log))
}

pub fn evaluate_model(cfg: &Config, data: &Data, state: &TrainerState) -> Result<EvalReport> {
    let train_split = data.train_split()?;
    let test_split = data.test_split()?;
    let prompts = if state.config.recipe.uses_contrast() {
        Some(data.prompts(&templates(cfg)?)?)
    } else {
        None
    };
    Ok(evaluate(
        state,
        &train_split,
        &test_split,
        prompts.as_ref(),
        &cfg.eval.config,
    )?)
}

pub fn run_train(cfg: &Config, out: &Path) -> Result<TrainerState> {
    let data = Data::load(cfg, out)?;
    let (state, log) = train_model(cfg, &data, &data.i2e)?;
    let mut staged = Staged::new();
    staged.write(out.join(files::CHECKPOINT), &state.encode())?;
    staged.write(out.join(files::METRICS), metrics_csv(&log).as_bytes())?;
    staged.commit()?;
    Ok(state)
}

pub fn run_eval(cfg: &Config, out: &Path, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let data = Data::load(cfg, out)?;
    let ckpt = checkpoint.map_or_else(|| out.join(files::CHECKPOINT), Path::to_path_buf);
    let state = TrainerState::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let report = evaluate_model(cfg, &data, &state)?;
    for (k, v) in &report.metrics {
        log::info!("{k} = {v:.4}");
    }

    let test = data.test_split()?;
    let train_split = data.train_split()?;
    let mut ids = train_split.ids.clone();
    ids.extend(test.ids.iter().cloned());
    let features = ndarray::concatenate(
        ndarray::Axis(0),
        &[train_split.features.view(), test.features.view()],
    )?;
    let store = export_embeddings(&state, &ids, &features)?;

    let mut staged = Staged::new();
    staged.write(out.join(files::REPORT), report.to_json().as_bytes())?;
    staged.write(
        out.join(files::PER_QUERY),
        report.per_query_csv().as_bytes(),
    )?;
    staged.write(out.join(files::EMBEDDINGS), &store.encode())?;
    staged.commit()?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    /// Sampled negative classes per step.
    Negatives,
    /// Number of most frequent entities kept for training.
    Entities,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Negatives => "negatives",
            Axis::Entities => "entities",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negatives" => Ok(Axis::Negatives),
            "entities" => Ok(Axis::Entities),
            other => bail!("unknown ablation axis {other:?} (expected negatives or entities)"),
        }
    }
}

pub const ABLATION_COLUMNS: [&str; 6] = [
    "map_all",
    "recall1",
    "recall5",
    "knn_acc",
    "probe_acc",
    "zs_acc",
];

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub value: usize,
    pub report: EvalReport,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("axis_value,{}\n", ABLATION_COLUMNS.join(","));
    for r in rows {
        let cells: Vec<String> = ABLATION_COLUMNS
            .iter()
            .map(|c| r.report.get(c).map_or_else(String::new, |v| v.to_string()))
            .collect();
        out.push_str(&format!("{},{}\n", r.value, cells.join(",")));
    }
    out
}

/// Trains and evaluates once per value along `axis`.
pub fn ablate(cfg: &Config, data: &Data, axis: Axis, values: &[usize]) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        bail!("ablation needs at least one value");
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut c = cfg.clone();
        let i2e = match axis {
            Axis::Negatives => {
                c.trainer.config.num_sampled_classes = value;
                data.i2e.clone()
            }
            Axis::Entities => keep_top_entities(&data.i2e, value),
        };
        if i2e.is_empty() {
            bail!("{} = {value} leaves no training examples", axis.as_str());
        }
        let (state, _) =
            train_model(&c, data, &i2e).with_context(|| format!("{} = {value}", axis.as_str()))?;
        let report = evaluate_model(&c, data, &state)?;
        log::info!(
            "{} = {value}: map_all {:.4}",
            axis.as_str(),
            report.get("map_all").unwrap_or(f64::NAN)
        );
        rows.push(AblationRow { value, report });
    }
    Ok(rows)
}

pub fn run_ablate(
    cfg: &Config,
    out: &Path,
    axis: Axis,
    values: &[usize],
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        bail!("ablation needs at least one value");
    }
    let data = Data::load(cfg, out)?;
    let rows = ablate(cfg, &data, axis, values)?;
    crate::io::write_atomic(&out.join(files::ABLATION), ablation_csv(&rows).as_bytes())?;
    Ok(rows)
}
