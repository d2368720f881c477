//! Retrieval and classification metrics over frozen embeddings.
//!
//! Rankings are by cosine similarity, descending, with ties broken by id so
//! results do not depend on input order or thread count.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::VectorStore;
use crate::trainer::{AdamWConfig, Moments, TrainerState, UNIT_NORM_TOLERANCE};

/// Unit-norm vectors with unique ids and optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    vectors: Array2<f64>,
    labels: Vec<Option<String>>,
}

impl RetrievalIndex {
    /// Fails on duplicate ids, length mismatches, or rows off the unit
    /// sphere.
    pub fn new(
        ids: Vec<String>,
        vectors: Array2<f64>,
        labels: Vec<Option<String>>,
    ) -> Result<Self> {
        if ids.len() != vectors.nrows() || ids.len() != labels.len() {
            return Err(Error::invalid(format!(
                "index has {} ids, {} vectors, {} labels",
                ids.len(),
                vectors.nrows(),
                labels.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        for (i, row) in vectors.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::invalid(format!(
                    "index row {:?} has norm {n}",
                    ids[i]
                )));
            }
        }
        Ok(RetrievalIndex {
            ids,
            vectors,
            labels,
        })
    }

    /// Like [`RetrievalIndex::new`] but L2-normalizes rows first. Zero rows
    /// are rejected.
    pub fn normalized(
        ids: Vec<String>,
        mut vectors: Array2<f64>,
        labels: Vec<Option<String>>,
    ) -> Result<Self> {
        for (i, mut row) in vectors.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::invalid(format!(
                    "cannot normalize row {i} with norm {n}"
                )));
            }
            row /= n;
        }
        Self::new(ids, vectors, labels)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn labels(&self) -> &[Option<String>] {
        &self.labels
    }

    /// Sub-index over the given row positions, in that order.
    pub fn select(&self, rows: &[usize]) -> Self {
        RetrievalIndex {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            vectors: self.vectors.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r].clone()).collect(),
        }
    }

    fn require_labels(&self, what: &str) -> Result<Vec<&str>> {
        self.labels
            .iter()
            .zip(&self.ids)
            .map(|(l, id)| {
                l.as_deref()
                    .ok_or_else(|| Error::invalid(format!("{what}: {id:?} has no label")))
            })
            .collect()
    }

    /// Row positions sorted by (cosine to `q` desc, id asc), skipping `skip`.
    fn ranking(&self, q: ArrayView1<f64>, skip: Option<usize>) -> Vec<(usize, f64)> {
        let sims = self.vectors.dot(&q);
        let mut order: Vec<(usize, f64)> = sims
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(i, &s)| (i, s))
            .collect();
        order.sort_by(|a, b| by_score_then_id(a.1, &self.ids[a.0], b.1, &self.ids[b.0]));
        order
    }
}

fn by_score_then_id(sa: f64, ia: &str, sb: f64, ib: &str) -> Ordering {
    sb.partial_cmp(&sa)
        .unwrap_or(Ordering::Equal)
        .then_with(|| ia.cmp(ib))
}

/// Average precision of a ranked relevance list: the mean of precision@r
/// over the ranks `r` of relevant items. Zero when nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryAp {
    pub id: String,
    pub class: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapResult {
    pub map: f64,
    /// Mean AP and query count per class.
    pub per_class: BTreeMap<String, (f64, usize)>,
    pub per_query: Vec<QueryAp>,
    /// Items that did not act as queries: unlabeled, or alone in their class.
    pub excluded: usize,
}

/// Every labeled image queries all the others. Queries whose class has a
/// single member are skipped and counted in `excluded`; they still appear
/// as negatives in other rankings.
pub fn map_at_all(index: &RetrievalIndex) -> Result<MapResult> {
    if index.len() < 2 {
        return Err(Error::invalid("mAP@all needs at least two images"));
    }
    let mut class_sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for l in index.labels.iter().flatten() {
        *class_sizes.entry(l.as_str()).or_default() += 1;
    }
    let queries: Vec<usize> = (0..index.len())
        .filter(|&i| {
            index.labels[i]
                .as_deref()
                .is_some_and(|l| class_sizes[l] >= 2)
        })
        .collect();
    let per_query: Vec<QueryAp> = queries
        .par_iter()
        .map(|&q| {
            let class = index.labels[q].as_deref().unwrap();
            let rel: Vec<bool> = index
                .ranking(index.vectors.row(q), Some(q))
                .iter()
                .map(|&(i, _)| index.labels[i].as_deref() == Some(class))
                .collect();
            QueryAp {
                id: index.ids[q].clone(),
                class: class.to_string(),
                ap: average_precision(&rel),
            }
        })
        .collect();
    let mut per_class: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for qa in &per_query {
        let e = per_class.entry(qa.class.clone()).or_default();
        e.0 += qa.ap;
        e.1 += 1;
    }
    for v in per_class.values_mut() {
        v.0 /= v.1 as f64;
    }
    let map = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|q| q.ap).sum::<f64>() / per_query.len() as f64
    };
    Ok(MapResult {
        map,
        per_class,
        excluded: index.len() - per_query.len(),
        per_query,
    })
}

/// Picks one random labeled image per class as a query; the rest form the
/// index. Returns `(queries, index)` as row positions.
pub fn split_queries(index: &RetrievalIndex, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let labels = index.require_labels("recall split")?;
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries: Vec<usize> = by_class
        .values()
        .map(|members| *members.choose(&mut rng).expect("class nonempty"))
        .collect();
    queries.sort_unstable();
    let chosen: BTreeSet<usize> = queries.iter().copied().collect();
    let rest = (0..index.len()).filter(|i| !chosen.contains(i)).collect();
    Ok((queries, rest))
}

/// Fraction of queries with at least one same-class item among the top `k`
/// of `index`.
pub fn recall_at_k(queries: &RetrievalIndex, index: &RetrievalIndex, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("recall@k needs k >= 1"));
    }
    if queries.is_empty() {
        return Err(Error::invalid("recall@k needs at least one query"));
    }
    let index_ids: BTreeSet<&str> = index.ids.iter().map(String::as_str).collect();
    if let Some(id) = queries
        .ids
        .iter()
        .find(|id| index_ids.contains(id.as_str()))
    {
        return Err(Error::invalid(format!("query {id:?} is also in the index")));
    }
    let q_labels = queries.require_labels("recall query")?;
    let hits: usize = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let hit = index
                .ranking(queries.vectors.row(q), None)
                .iter()
                .take(k)
                .any(|&(i, _)| index.labels[i].as_deref() == Some(q_labels[q]));
            usize::from(hit)
        })
        .sum();
    Ok(hits as f64 / queries.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Uniform,
    Similarity,
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weighting::Uniform => "uniform",
            Weighting::Similarity => "similarity",
        })
    }
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "similarity" => Ok(Weighting::Similarity),
            other => Err(Error::invalid(format!("unknown weighting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnConfig {
    pub ks: Vec<usize>,
    pub weightings: Vec<Weighting>,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            ks: vec![1, 5, 10, 20],
            weightings: vec![Weighting::Uniform, Weighting::Similarity],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnnResult {
    pub accuracy: f64,
    pub k: usize,
    pub weighting: Weighting,
    /// `(k, weighting, accuracy)` for every sweep point.
    pub sweep: Vec<(usize, Weighting, f64)>,
}

/// Vote over a precomputed ranking. Ties go to the larger summed
/// similarity, then the smaller label.
fn vote<'a>(
    neighbors: &[(usize, f64)],
    labels: &[&'a str],
    k: usize,
    weighting: Weighting,
) -> &'a str {
    let mut tally: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for &(i, s) in neighbors.iter().take(k) {
        let e = tally.entry(labels[i]).or_default();
        e.0 += match weighting {
            Weighting::Uniform => 1.0,
            Weighting::Similarity => s,
        };
        e.1 += s;
    }
    let mut best: Option<(&str, (f64, f64))> = None;
    for (label, score) in tally {
        let better = match best {
            None => true,
            Some((_, b)) => score.0 > b.0 || (score.0 == b.0 && score.1 > b.1),
        };
        if better {
            best = Some((label, score));
        }
    }
    best.map(|(l, _)| l).expect("k >= 1 and nonempty train set")
}

/// kNN classification of `eval` against `train`, reporting the best sweep
/// point (first in sweep order on ties).
pub fn knn_eval(
    train: &RetrievalIndex,
    eval: &RetrievalIndex,
    config: &KnnConfig,
) -> Result<KnnResult> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::invalid("kNN needs nonempty train and eval sets"));
    }
    if config.ks.is_empty() || config.weightings.is_empty() || config.ks.contains(&0) {
        return Err(Error::invalid(
            "kNN sweep needs positive k values and a weighting",
        ));
    }
    let train_labels = train.require_labels("kNN train")?;
    let eval_labels = eval.require_labels("kNN eval")?;
    let max_k = *config.ks.iter().max().unwrap();
    let points: Vec<(usize, Weighting)> = config
        .ks
        .iter()
        .flat_map(|&k| config.weightings.iter().map(move |&w| (k, w)))
        .collect();
    let correct: Vec<Vec<bool>> = (0..eval.len())
        .into_par_iter()
        .map(|q| {
            let mut ranked = train.ranking(eval.vectors.row(q), None);
            ranked.truncate(max_k);
            points
                .iter()
                .map(|&(k, w)| vote(&ranked, &train_labels, k, w) == eval_labels[q])
                .collect()
        })
        .collect();
    let sweep: Vec<(usize, Weighting, f64)> = points
        .iter()
        .enumerate()
        .map(|(p, &(k, w))| {
            let c = correct.iter().filter(|row| row[p]).count();
            (k, w, c as f64 / eval.len() as f64)
        })
        .collect();
    let best = sweep
        .iter()
        .fold(None::<(usize, Weighting, f64)>, |acc, &pt| match acc {
            Some(a) if a.2 >= pt.2 => Some(a),
            _ => Some(pt),
        })
        .unwrap();
    Ok(KnnResult {
        accuracy: best.2,
        k: best.0,
        weighting: best.1,
        sweep,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: vec![10, 20, 40, 80, 160],
            learning_rates: vec![1e-1, 1e-2, 1e-3, 1e-4],
            batch_size: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// `(epochs, lr, accuracy)` for every sweep point.
    pub sweep: Vec<(usize, f64, f64)>,
}

fn argmax_row(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Multinomial logistic regression on frozen features, trained with Adam
/// and no weight decay. Each learning rate gets one run to the largest
/// epoch count, scored at every epoch count in the sweep.
pub fn linear_probe(
    train: &RetrievalIndex,
    val: &RetrievalIndex,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    let train_labels = train.require_labels("probe train")?;
    let val_labels = val.require_labels("probe val")?;
    let classes: Vec<&str> = train_labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.len() < 2 {
        return Err(Error::invalid("linear probe needs at least two classes"));
    }
    if config.epochs.is_empty() || config.learning_rates.is_empty() || config.batch_size == 0 {
        return Err(Error::invalid("probe sweep is empty"));
    }
    let class_of: BTreeMap<&str, usize> =
        classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let y: Vec<usize> = train_labels.iter().map(|l| class_of[l]).collect();
    // Validation labels unseen in training can never be predicted.
    let y_val: Vec<Option<usize>> = val_labels
        .iter()
        .map(|l| class_of.get(l).copied())
        .collect();
    let mut checkpoints = config.epochs.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let max_epochs = *checkpoints.last().unwrap();
    let (n, d, c) = (train.len(), train.vectors.ncols(), classes.len());
    let adam = AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    };

    let runs: Vec<Vec<(usize, f64)>> = config
        .learning_rates
        .par_iter()
        .map(|&lr| {
            let mut w = Array2::<f64>::zeros((d, c));
            let mut b = Array1::<f64>::zeros(c);
            let (mut mw, mut mb) = (Moments::new(d * c), Moments::new(c));
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut order: Vec<usize> = (0..n).collect();
            let mut t = 0;
            let mut scores = Vec::new();
            for epoch in 1..=max_epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(config.batch_size) {
                    let x = train.vectors.select(Axis(0), chunk);
                    let mut logits = x.dot(&w) + &b;
                    for (mut row, &i) in logits.rows_mut().into_iter().zip(chunk) {
                        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                        row.mapv_inplace(|v| (v - m).exp());
                        let s = row.sum();
                        row /= s;
                        row[y[i]] -= 1.0;
                    }
                    logits /= chunk.len() as f64;
                    let gw = x.t().dot(&logits);
                    let gb = logits.sum_axis(Axis(0));
                    t += 1;
                    mw.step(
                        w.as_slice_mut().unwrap(),
                        gw.as_slice().unwrap(),
                        lr,
                        t,
                        &adam,
                        false,
                    );
                    mb.step(
                        b.as_slice_mut().unwrap(),
                        gb.as_slice().unwrap(),
                        lr,
                        t,
                        &adam,
                        false,
                    );
                }
                if checkpoints.binary_search(&epoch).is_ok() {
                    let pred = val.vectors.dot(&w) + &b;
                    let correct = pred
                        .rows()
                        .into_iter()
                        .zip(&y_val)
                        .filter(|(row, yv)| Some(argmax_row(row.view())) == **yv)
                        .count();
                    scores.push((epoch, correct as f64 / val.len().max(1) as f64));
                }
            }
            scores
        })
        .collect();

    let mut sweep = Vec::new();
    for &e in &config.epochs {
        for (li, &lr) in config.learning_rates.iter().enumerate() {
            let acc = runs[li]
                .iter()
                .find(|(ep, _)| *ep == e)
                .map(|p| p.1)
                .unwrap();
            sweep.push((e, lr, acc));
        }
    }
    let best = sweep
        .iter()
        .fold(None::<(usize, f64, f64)>, |acc, &pt| match acc {
            Some(a) if a.2 >= pt.2 => Some(a),
            _ => Some(pt),
        })
        .unwrap();
    Ok(ProbeResult {
        accuracy: best.2,
        epochs: best.0,
        learning_rate: best.1,
        sweep,
    })
}

/// Prompt templates with a `{name}` placeholder, one per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates(Vec<String>);

pub const DEFAULT_TEMPLATE: &str = "a photo of {name}.";

impl Default for Templates {
    fn default() -> Self {
        Templates(vec![DEFAULT_TEMPLATE.to_string()])
    }
}

impl Templates {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::format("templates", "no templates"));
        }
        if let Some(t) = templates.iter().find(|t| !t.contains("{name}")) {
            return Err(Error::format(
                "templates",
                format!("{t:?} lacks a {{name}} placeholder"),
            ));
        }
        Ok(Templates(templates))
    }

    /// Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn render(&self, name: &str) -> Vec<String> {
        self.0.iter().map(|t| t.replace("{name}", name)).collect()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }
}

/// Mean of per-template embeddings, re-normalized.
pub fn prompt_embedding(per_template: &Array2<f64>) -> Result<Array1<f64>> {
    if per_template.nrows() == 0 {
        return Err(Error::invalid("no template embeddings"));
    }
    let mean = per_template.mean_axis(Axis(0)).unwrap();
    let n = mean.dot(&mean).sqrt();
    if !(n > 0.0) {
        return Err(Error::invalid("template embeddings cancel out"));
    }
    Ok(mean / n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroShotResult {
    pub accuracy: f64,
    pub predictions: Vec<String>,
}

/// Predicts the class whose prompt embedding has the highest cosine with
/// each image; ties go to the smaller class id.
pub fn zeroshot_eval(
    images: &RetrievalIndex,
    class_ids: &[String],
    prompts: &Array2<f64>,
) -> Result<ZeroShotResult> {
    if class_ids.is_empty() || class_ids.len() != prompts.nrows() {
        return Err(Error::invalid("one prompt embedding per class is required"));
    }
    if images.is_empty() {
        return Err(Error::invalid("zero-shot needs at least one image"));
    }
    let labels = images.require_labels("zero-shot")?;
    let prompt_index = RetrievalIndex::new(
        class_ids.to_vec(),
        prompts.clone(),
        vec![None; class_ids.len()],
    )?;
    let predictions: Vec<String> = (0..images.len())
        .into_par_iter()
        .map(|i| {
            let top = prompt_index.ranking(images.vectors.row(i), None)[0].0;
            class_ids[top].clone()
        })
        .collect();
    let correct = predictions
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(ZeroShotResult {
        accuracy: correct as f64 / images.len() as f64,
        predictions,
    })
}

/// Metric name → value, plus per-query AP rows.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip)]
    pub per_query: Vec<QueryAp>,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.metrics).expect("metrics serialize");
        s.push('\n');
        s
    }

    pub fn per_query_csv(&self) -> String {
        let mut out = String::from("query_id,class,ap\n");
        for q in &self.per_query {
            out.push_str(&format!("{},{},{}\n", q.id, q.class, q.ap));
        }
        out
    }

    /// Checks that every rate-valued metric lies in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        for (k, v) in &self.metrics {
            let bounded = !(k.ends_with("_k")
                || k.ends_with("_epochs")
                || k.ends_with("_lr")
                || k.ends_with("_excluded"));
            if !v.is_finite() || (bounded && !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("metric {k} = {v} out of range")));
            }
        }
        Ok(())
    }
}

/// Labeled raw features for one evaluation split.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub ids: Vec<String>,
    pub features: Array2<f64>,
    pub labels: Vec<String>,
}

impl EvalSplit {
    pub fn embed(&self, state: &TrainerState) -> Result<RetrievalIndex> {
        RetrievalIndex::new(
            self.ids.clone(),
            state.embed_images(&self.features),
            self.labels.iter().cloned().map(Some).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub recall_ks: Vec<usize>,
    pub knn: KnnConfig,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            recall_ks: vec![1, 5],
            knn: KnnConfig::default(),
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

/// Class ids with their prompt text features, one row per template.
#[derive(Debug, Clone)]
pub struct PromptFeatures {
    pub class_ids: Vec<String>,
    pub per_class: Vec<Array2<f64>>,
}

/// Full report: mAP@all and Recall@k on `test`, kNN and linear probe
/// trained on `train` and scored on `test`, and zero-shot when prompts are
/// given.
pub fn evaluate(
    state: &TrainerState,
    train: &EvalSplit,
    test: &EvalSplit,
    prompts: Option<&PromptFeatures>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let test_index = test.embed(state)?;
    let train_index = train.embed(state)?;
    let mut report = EvalReport::default();
    let m = &mut report.metrics;

    let map = map_at_all(&test_index)?;
    m.insert("map_all".into(), map.map);
    m.insert("map_excluded".into(), map.excluded as f64);
    report.per_query = map.per_query;

    let (q, rest) = split_queries(&test_index, config.seed)?;
    let (queries, index) = (test_index.select(&q), test_index.select(&rest));
    for &k in &config.recall_ks {
        m.insert(format!("recall{k}"), recall_at_k(&queries, &index, k)?);
    }

    let knn = knn_eval(&train_index, &test_index, &config.knn)?;
    m.insert("knn_acc".into(), knn.accuracy);
    m.insert("knn_k".into(), knn.k as f64);

    let probe = linear_probe(&train_index, &test_index, &config.probe)?;
    m.insert("probe_acc".into(), probe.accuracy);
    m.insert("probe_epochs".into(), probe.epochs as f64);
    m.insert("probe_lr".into(), probe.learning_rate);

    if let Some(p) = prompts {
        let mut rows = Array2::zeros((p.class_ids.len(), state.config.embed_dim));
        for (i, feats) in p.per_class.iter().enumerate() {
            let e = prompt_embedding(&state.embed_texts(feats))?;
            rows.row_mut(i).assign(&e);
        }
        let zs = zeroshot_eval(&test_index, &p.class_ids, &rows)?;
        m.insert("zs_acc".into(), zs.accuracy);
    }
    report.validate()?;
    Ok(report)
}

/// Image embeddings keyed by id, in the binary vector-store format.
pub fn export_embeddings(
    state: &TrainerState,
    ids: &[String],
    features: &Array2<f64>,
) -> Result<VectorStore> {
    if ids.len() != features.nrows() {
        return Err(Error::invalid("one feature row per id is required"));
    }
    let emb = state.embed_images(features);
    let mut store = VectorStore::new(emb.ncols());
    for (id, row) in ids.iter().zip(emb.rows()) {
        store.insert_f64(id, &row.to_vec())?;
    }
    Ok(store)
}
