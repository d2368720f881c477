//! Image-to-entities dataset construction.
//!
//! Stage order is fixed: pair filtering (NSFW, size, duplicate hash, text
//! statistics, image-text similarity), entity scoring against the image, and
//! rare-entity removal. Every stage produces a [`StageLedger`] whose counts
//! reconcile exactly with its input.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::linker::LinkedPair;
use crate::store::VectorStore;
use crate::text::tokenize;
use crate::vector::cosine;

/// One crawled image-text pair.
///
/// File format: `image_id \t text \t min_dim_px \t nsfw(0/1) \t image_hash \t feature_key`.
/// The image feature is looked up by `image_id`, the text feature by
/// `feature_key`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTextPair {
    pub image_id: String,
    pub text: String,
    pub min_dim_px: u32,
    pub nsfw: bool,
    pub image_hash: String,
    pub feature_key: String,
}

impl ImageTextPair {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.image_id,
            self.text,
            self.min_dim_px,
            u8::from(self.nsfw),
            self.image_hash,
            self.feature_key
        )
    }

    pub fn parse_line(line: &str, lineno: usize) -> Result<Self> {
        const WHAT: &str = "pairs";
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(Error::parse(
                WHAT,
                lineno,
                format!("expected 6 tab-separated columns, found {}", cols.len()),
            ));
        }
        if cols[0].is_empty() {
            return Err(Error::parse(WHAT, lineno, "empty image id"));
        }
        let min_dim_px = cols[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(WHAT, lineno, format!("bad min_dim_px {:?}", cols[2])))?;
        let nsfw = match cols[3].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::parse(
                    WHAT,
                    lineno,
                    format!("bad nsfw flag {other:?}"),
                ))
            }
        };
        Ok(ImageTextPair {
            image_id: cols[0].to_string(),
            text: cols[1].to_string(),
            min_dim_px,
            nsfw,
            image_hash: cols[4].to_string(),
            feature_key: cols[5].to_string(),
        })
    }

    pub fn parse(text: &str) -> Result<Vec<Self>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|(i, l)| Self::parse_line(l, i + 1))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vec<Self>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Corpus-level statistics of one text.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TextStats {
    /// Length in characters.
    pub length: usize,
    /// Number of pairs in the corpus carrying exactly this text.
    pub full_text_frequency: usize,
    /// Mean log10 corpus count of the text's unigrams (0 for empty text).
    pub unigram_score: f64,
    /// Mean log10 corpus count of the text's bigrams (0 when fewer than two
    /// tokens).
    pub bigram_score: f64,
}

/// Computes [`TextStats`] for every pair against the whole input corpus.
pub fn text_stats(pairs: &[ImageTextPair]) -> Vec<TextStats> {
    let mut full: HashMap<&str, usize> = HashMap::new();
    let mut uni: HashMap<String, usize> = HashMap::new();
    let mut bi: HashMap<(String, String), usize> = HashMap::new();
    let tokens: Vec<Vec<String>> = pairs.iter().map(|p| tokenize(&p.text)).collect();
    for (p, toks) in pairs.iter().zip(&tokens) {
        *full.entry(p.text.as_str()).or_default() += 1;
        for t in toks {
            *uni.entry(t.clone()).or_default() += 1;
        }
        for w in toks.windows(2) {
            *bi.entry((w[0].clone(), w[1].clone())).or_default() += 1;
        }
    }
    let mean_log = |counts: Vec<usize>| {
        if counts.is_empty() {
            0.0
        } else {
            counts.iter().map(|&c| (c as f64).log10()).sum::<f64>() / counts.len() as f64
        }
    };
    pairs
        .iter()
        .zip(&tokens)
        .map(|(p, toks)| TextStats {
            length: p.text.chars().count(),
            full_text_frequency: full[p.text.as_str()],
            unigram_score: mean_log(toks.iter().map(|t| uni[t]).collect()),
            bigram_score: mean_log(
                toks.windows(2)
                    .map(|w| bi[&(w[0].clone(), w[1].clone())])
                    .collect(),
            ),
        })
        .collect()
}

/// Optional bounds on [`TextStats`]; unset bounds pass everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextBounds {
    pub min_length: Option<usize>,
    pub max_length: Option<usize>,
    pub max_full_text_frequency: Option<usize>,
    pub min_unigram_score: Option<f64>,
    pub max_unigram_score: Option<f64>,
    pub min_bigram_score: Option<f64>,
    pub max_bigram_score: Option<f64>,
}

impl TextBounds {
    pub fn admits(&self, s: &TextStats) -> bool {
        let lo = |b: Option<f64>, v: f64| b.is_none_or(|b| v >= b);
        let hi = |b: Option<f64>, v: f64| b.is_none_or(|b| v <= b);
        self.min_length.is_none_or(|b| s.length >= b)
            && self.max_length.is_none_or(|b| s.length <= b)
            && self
                .max_full_text_frequency
                .is_none_or(|b| s.full_text_frequency <= b)
            && lo(self.min_unigram_score, s.unigram_score)
            && hi(self.max_unigram_score, s.unigram_score)
            && lo(self.min_bigram_score, s.bigram_score)
            && hi(self.max_bigram_score, s.bigram_score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CuratorConfig {
    pub pair_threshold: f64,
    pub entity_threshold: f64,
    pub min_dim: u32,
    pub min_images_per_entity: usize,
    pub text: TextBounds,
}

impl Default for CuratorConfig {
    fn default() -> Self {
        CuratorConfig {
            pair_threshold: 0.24,
            entity_threshold: 0.24,
            min_dim: 200,
            min_images_per_entity: 5,
            text: TextBounds::default(),
        }
    }
}

impl CuratorConfig {
    /// Thresholds may exceed 1 to reject everything; they only need to be
    /// finite numbers.
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("pair_threshold", self.pair_threshold),
            ("entity_threshold", self.entity_threshold),
        ] {
            if !t.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite")));
            }
        }
        if self.min_images_per_entity == 0 {
            return Err(Error::invalid("min_images_per_entity must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    Nsfw,
    Size,
    Duplicate,
    TextStats,
    Similarity,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Nsfw => "nsfw",
            RejectReason::Size => "size",
            RejectReason::Duplicate => "duplicate",
            RejectReason::TextStats => "text_stats",
            RejectReason::Similarity => "similarity",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-stage accounting: `input == retained + Σ rejected`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLedger {
    pub stage: String,
    pub input: usize,
    pub retained: usize,
    pub rejected: BTreeMap<String, usize>,
}

impl StageLedger {
    pub fn new(stage: &str, input: usize) -> Self {
        StageLedger {
            stage: stage.to_string(),
            input,
            ..Default::default()
        }
    }

    pub fn reject(&mut self, reason: &str) {
        *self.rejected.entry(reason.to_string()).or_default() += 1;
    }

    pub fn count(&self, reason: &str) -> usize {
        self.rejected.get(reason).copied().unwrap_or(0)
    }

    pub fn reconciles(&self) -> bool {
        self.input == self.retained + self.rejected.values().sum::<usize>()
    }
}

/// Per-pair verdict, kept so callers can inspect why each pair was dropped.
pub type PairVerdicts = Vec<Option<RejectReason>>;

/// Filters pairs in the fixed order NSFW → size → dedup → text stats →
/// similarity. The first pair with a given hash wins. Similarity is the cosine
/// between the image feature (keyed by `image_id`) and the text feature
/// (keyed by `feature_key`); pairs strictly below `pair_threshold` are
/// rejected.
pub fn filter_pairs(
    pairs: &[ImageTextPair],
    config: &CuratorConfig,
    store: &VectorStore,
) -> Result<(Vec<ImageTextPair>, StageLedger, PairVerdicts)> {
    config.validate()?;
    let stats = text_stats(pairs);
    let mut seen_hash: HashSet<&str> = HashSet::new();
    let mut verdicts: PairVerdicts = vec![None; pairs.len()];
    for (i, p) in pairs.iter().enumerate() {
        verdicts[i] = if p.nsfw {
            Some(RejectReason::Nsfw)
        } else if p.min_dim_px < config.min_dim {
            Some(RejectReason::Size)
        } else if !seen_hash.insert(p.image_hash.as_str()) {
            Some(RejectReason::Duplicate)
        } else if !config.text.admits(&stats[i]) {
            Some(RejectReason::TextStats)
        } else {
            None
        };
    }
    let sims: Vec<Result<Option<f64>>> = pairs
        .par_iter()
        .zip(verdicts.par_iter())
        .map(|(p, v)| {
            if v.is_some() {
                return Ok(None);
            }
            let img = store.require(&p.image_id)?;
            let txt = store.require(&p.feature_key)?;
            Ok(Some(cosine(&img, &txt)))
        })
        .collect();
    let mut ledger = StageLedger::new("filter_pairs", pairs.len());
    let mut kept = Vec::new();
    for ((p, v), sim) in pairs.iter().zip(verdicts.iter_mut()).zip(sims) {
        if let Some(sim) = sim? {
            if sim < config.pair_threshold {
                *v = Some(RejectReason::Similarity);
            }
        }
        match v {
            Some(r) => ledger.reject(r.as_str()),
            None => {
                ledger.retained += 1;
                kept.push(p.clone());
            }
        }
    }
    Ok((kept, ledger, verdicts))
}

/// A curated example: an image with its surviving entity labels.
///
/// File format: `image_id \t entity_id1:cos1|entity_id2:cos2 \t text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct I2EExample {
    pub image_id: String,
    pub entity_labels: Vec<(String, f64)>,
    pub text: String,
}

impl I2EExample {
    pub fn to_line(&self) -> String {
        let labels: Vec<String> = self
            .entity_labels
            .iter()
            .map(|(id, c)| format!("{id}:{c}"))
            .collect();
        format!("{}\t{}\t{}", self.image_id, labels.join("|"), self.text)
    }

    pub fn parse_line(line: &str, lineno: usize) -> Result<Self> {
        const WHAT: &str = "i2e";
        let cols: Vec<&str> = line.splitn(3, '\t').collect();
        if cols.len() != 3 {
            return Err(Error::parse(
                WHAT,
                lineno,
                "expected 3 tab-separated columns",
            ));
        }
        if cols[0].is_empty() {
            return Err(Error::parse(WHAT, lineno, "empty image id"));
        }
        let mut labels = Vec::new();
        for item in cols[1].split('|').filter(|s| !s.is_empty()) {
            let (id, cos) = item
                .rsplit_once(':')
                .ok_or_else(|| Error::parse(WHAT, lineno, format!("bad label {item:?}")))?;
            let cos: f64 = cos
                .parse()
                .map_err(|_| Error::parse(WHAT, lineno, format!("bad cosine in {item:?}")))?;
            if id.is_empty() || !cos.is_finite() {
                return Err(Error::parse(WHAT, lineno, format!("bad label {item:?}")));
            }
            labels.push((id.to_string(), cos));
        }
        Ok(I2EExample {
            image_id: cols[0].to_string(),
            entity_labels: labels,
            text: cols[2].to_string(),
        })
    }

    pub fn parse(text: &str) -> Result<Vec<Self>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|(i, l)| Self::parse_line(l, i + 1))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vec<Self>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_tsv(examples: &[Self]) -> String {
        let mut out = String::new();
        for e in examples {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        out
    }
}

/// Checks the I2E row invariants; returns one message per violation.
pub fn validate_i2e(examples: &[I2EExample], entity_threshold: f64) -> Vec<String> {
    let mut problems = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        if e.entity_labels.is_empty() {
            problems.push(format!("row {i} ({}): no entity labels", e.image_id));
        }
        for (id, c) in &e.entity_labels {
            if *c < entity_threshold {
                problems.push(format!(
                    "row {i} ({}): {id} cosine {c} below threshold {entity_threshold}",
                    e.image_id
                ));
            }
        }
    }
    problems
}

/// Source of text embeddings for entities. Implementations receive both the
/// entity id and its enriched `"name, description"` text.
pub trait EntityTextEmbedder: Sync {
    fn embed(&self, entity_id: &str, enriched_text: &str) -> Option<Vec<f64>>;
}

/// Looks entity embeddings up by entity id.
impl EntityTextEmbedder for VectorStore {
    fn embed(&self, entity_id: &str, _enriched_text: &str) -> Option<Vec<f64>> {
        self.get_f64(entity_id)
    }
}

impl<F> EntityTextEmbedder for F
where
    F: Fn(&str, &str) -> Option<Vec<f64>> + Sync,
{
    fn embed(&self, entity_id: &str, enriched_text: &str) -> Option<Vec<f64>> {
        self(entity_id, enriched_text)
    }
}

/// Ledgers for entity scoring: one over (image, entity) assignments and one
/// over examples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreLedger {
    pub assignments: StageLedger,
    pub examples: StageLedger,
}

/// Keeps linked entities whose enriched-text embedding has cosine at least
/// `entity_threshold` with the image feature. Examples left without entities
/// are dropped. Repeated mentions of one entity in a text count once.
pub fn score_entities(
    linked: &[LinkedPair],
    kb: &KnowledgeBase,
    images: &VectorStore,
    entities: &dyn EntityTextEmbedder,
    config: &CuratorConfig,
) -> Result<(Vec<I2EExample>, ScoreLedger)> {
    config.validate()?;
    type Scored = (Vec<(String, f64)>, usize, usize, usize);
    let scored: Vec<Result<Scored>> = linked
        .par_iter()
        .map(|lp| {
            let img = images.require(&lp.pair.image_id)?;
            let mut seen = HashSet::new();
            let (mut kept, mut below, mut missing, mut total) = (Vec::new(), 0, 0, 0);
            for span in &lp.spans {
                if !seen.insert(span.entity_id.as_str()) {
                    continue;
                }
                total += 1;
                let enriched = kb.enrich(&span.entity_id)?;
                match entities.embed(&span.entity_id, &enriched) {
                    None => missing += 1,
                    Some(v) => {
                        let c = cosine(&img, &v);
                        if c >= config.entity_threshold {
                            kept.push((span.entity_id.clone(), c));
                        } else {
                            below += 1;
                        }
                    }
                }
            }
            Ok((kept, below, missing, total))
        })
        .collect();
    let mut ledger = ScoreLedger {
        assignments: StageLedger::new("score_entities.assignments", 0),
        examples: StageLedger::new("score_entities.examples", linked.len()),
    };
    let mut out = Vec::new();
    for (lp, res) in linked.iter().zip(scored) {
        let (kept, below, missing, total) = res?;
        let a = &mut ledger.assignments;
        a.input += total;
        a.retained += kept.len();
        if below > 0 {
            *a.rejected.entry("below_threshold".into()).or_default() += below;
        }
        if missing > 0 {
            *a.rejected.entry("missing_embedding".into()).or_default() += missing;
        }
        if kept.is_empty() {
            ledger.examples.reject("no_entities");
        } else {
            ledger.examples.retained += 1;
            out.push(I2EExample {
                image_id: lp.pair.image_id.clone(),
                entity_labels: kept,
                text: lp.pair.text.clone(),
            });
        }
    }
    Ok((out, ledger))
}

/// Lower bucket edges of the images-per-entity histogram; the last bucket is
/// unbounded.
pub const HISTOGRAM_EDGES: [usize; 6] = [0, 5, 10, 100, 1000, 10000];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityHistogram {
    pub counts: [usize; 6],
}

impl EntityHistogram {
    pub fn from_counts<'a>(per_entity: impl IntoIterator<Item = &'a usize>) -> Self {
        let mut h = EntityHistogram::default();
        for &c in per_entity {
            let b = HISTOGRAM_EDGES.iter().rposition(|&lo| c >= lo).unwrap_or(0);
            h.counts[b] += 1;
        }
        h
    }

    /// `(lo, hi, count)` rows; `hi` is `None` for the open last bucket.
    pub fn rows(&self) -> Vec<(usize, Option<usize>, usize)> {
        (0..HISTOGRAM_EDGES.len())
            .map(|i| {
                (
                    HISTOGRAM_EDGES[i],
                    HISTOGRAM_EDGES.get(i + 1).copied(),
                    self.counts[i],
                )
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("lo\thi\tcount\n");
        for (lo, hi, n) in self.rows() {
            let hi = hi.map_or_else(|| "inf".to_string(), |h| h.to_string());
            out.push_str(&format!("{lo}\t{hi}\t{n}\n"));
        }
        out
    }
}

/// Images per entity, counting each example once per entity it carries.
pub fn images_per_entity(examples: &[I2EExample]) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for e in examples {
        let unique: HashSet<&str> = e.entity_labels.iter().map(|l| l.0.as_str()).collect();
        for id in unique {
            *counts.entry(id.to_string()).or_default() += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildLedger {
    pub entities: StageLedger,
    pub examples: StageLedger,
}

fn retain_entities(
    examples: &[I2EExample],
    keep: impl Fn(&str) -> bool,
    stage: &str,
) -> (Vec<I2EExample>, StageLedger) {
    let mut ledger = StageLedger::new(stage, examples.len());
    let mut out = Vec::new();
    for e in examples {
        let labels: Vec<(String, f64)> = e
            .entity_labels
            .iter()
            .filter(|(id, _)| keep(id))
            .cloned()
            .collect();
        if labels.is_empty() {
            ledger.reject("no_entities");
        } else {
            ledger.retained += 1;
            out.push(I2EExample {
                entity_labels: labels,
                ..e.clone()
            });
        }
    }
    (out, ledger)
}

/// Removes entities with fewer than `min_images_per_entity` images, then
/// examples left without labels. The histogram covers the input counts, so
/// the `[0, 5)` bucket reports what was removed.
pub fn build_i2e(
    examples: &[I2EExample],
    config: &CuratorConfig,
) -> Result<(Vec<I2EExample>, EntityHistogram, BuildLedger)> {
    config.validate()?;
    let counts = images_per_entity(examples);
    let histogram = EntityHistogram::from_counts(counts.values());
    let mut entities = StageLedger::new("build_i2e.entities", counts.len());
    for &c in counts.values() {
        if c >= config.min_images_per_entity {
            entities.retained += 1;
        } else {
            entities.reject("too_few_images");
        }
    }
    let (out, ex_ledger) = retain_entities(
        examples,
        |id| counts[id] >= config.min_images_per_entity,
        "build_i2e.examples",
    );
    Ok((
        out,
        histogram,
        BuildLedger {
            entities,
            examples: ex_ledger,
        },
    ))
}

/// Keeps the `k` entities with the most images (ties by entity id) and drops
/// examples left empty.
pub fn keep_top_entities(examples: &[I2EExample], k: usize) -> Vec<I2EExample> {
    let counts = images_per_entity(examples);
    let mut ranked: Vec<(&String, &usize)> = counts.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    let keep: HashSet<&str> = ranked.iter().take(k).map(|e| e.0.as_str()).collect();
    retain_entities(examples, |id| keep.contains(id), "top_entities").0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MixMode {
    /// Contrastive text is always the enriched entity text.
    I2eOnly,
    /// Contrastive text is always the original alt-text.
    I2tOnly,
    /// Entity text and alt-text with equal probability.
    #[default]
    Mixed,
}

impl std::str::FromStr for MixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2e-only" => Ok(MixMode::I2eOnly),
            "i2t-only" => Ok(MixMode::I2tOnly),
            "mixed" => Ok(MixMode::Mixed),
            other => Err(Error::invalid(format!("unknown mix mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextSource {
    Entity,
    AltText,
}

/// Training example carrying entity labels, the original text and the text
/// chosen for the contrastive branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedExample {
    pub image_id: String,
    pub labels: Vec<String>,
    pub alt_text: String,
    /// Feature-store key of the alt-text embedding.
    pub alt_text_key: String,
    pub text: String,
    /// Feature-store key of `text`: an entity id or the alt-text key.
    pub text_key: String,
    pub text_source: TextSource,
}

/// Joins I2E examples back to their pairs and picks each example's
/// contrastive text per `mode`. Entity text uses one uniformly chosen label.
pub fn merge_i2t(
    i2e: &[I2EExample],
    pairs: &[ImageTextPair],
    kb: &KnowledgeBase,
    mode: MixMode,
    seed: u64,
) -> Result<Vec<CombinedExample>> {
    let mut by_image: HashMap<&str, &ImageTextPair> = HashMap::new();
    for p in pairs {
        by_image.entry(p.image_id.as_str()).or_insert(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(i2e.len());
    for e in i2e {
        let pair = by_image.get(e.image_id.as_str()).ok_or_else(|| {
            Error::invalid(format!("image {:?} missing from pair file", e.image_id))
        })?;
        let labels: Vec<String> = e.entity_labels.iter().map(|l| l.0.clone()).collect();
        if labels.is_empty() {
            return Err(Error::invalid(format!(
                "image {:?} has no labels",
                e.image_id
            )));
        }
        let use_entity = match mode {
            MixMode::I2eOnly => true,
            MixMode::I2tOnly => false,
            MixMode::Mixed => rng.random_bool(0.5),
        };
        let (text, text_key, text_source) = if use_entity {
            let id = labels.choose(&mut rng).expect("nonempty");
            (kb.enrich(id)?, id.clone(), TextSource::Entity)
        } else {
            (
                pair.text.clone(),
                pair.feature_key.clone(),
                TextSource::AltText,
            )
        };
        out.push(CombinedExample {
            image_id: e.image_id.clone(),
            labels,
            alt_text: pair.text.clone(),
            alt_text_key: pair.feature_key.clone(),
            text,
            text_key,
            text_source,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linker::LinkedSpan;

    fn pair(id: &str, dim: u32, nsfw: bool, hash: &str) -> ImageTextPair {
        ImageTextPair {
            image_id: id.into(),
            text: format!("text for {id}"),
            min_dim_px: dim,
            nsfw,
            image_hash: hash.into(),
            feature_key: format!("t:{id}"),
        }
    }

    /// Image feature e1, text feature at the given cosine from it.
    fn add_pair_features(store: &mut VectorStore, id: &str, cos: f64) {
        store.insert_f64(id, &[1.0, 0.0, 0.0]).unwrap();
        store
            .insert_f64(format!("t:{id}"), &[cos, (1.0 - cos * cos).sqrt(), 0.0])
            .unwrap();
    }

    #[test]
    fn pair_filters_apply_in_order() {
        let mut store = VectorStore::new(3);
        let pairs = vec![
            pair("a", 300, false, "h1"),
            pair("b", 300, true, "h2"),
            pair("c", 199, false, "h3"),
            pair("d", 200, false, "h1"),
            pair("e", 250, false, "h5"),
            pair("f", 250, false, "h6"),
        ];
        for (id, c) in [("a", 0.5), ("d", 0.9), ("e", 0.23), ("f", 0.24)] {
            add_pair_features(&mut store, id, c);
        }
        let (kept, ledger, verdicts) =
            filter_pairs(&pairs, &CuratorConfig::default(), &store).unwrap();
        let ids: Vec<&str> = kept.iter().map(|p| p.image_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "f"]);
        assert_eq!(verdicts[1], Some(RejectReason::Nsfw));
        assert_eq!(verdicts[2], Some(RejectReason::Size));
        assert_eq!(verdicts[3], Some(RejectReason::Duplicate));
        assert_eq!(verdicts[4], Some(RejectReason::Similarity));
        assert_eq!(ledger.count("similarity"), 1);
        assert!(ledger.reconciles());
    }

    #[test]
    fn missing_feature_is_error() {
        let store = VectorStore::new(3);
        let err = filter_pairs(
            &[pair("a", 300, false, "h")],
            &CuratorConfig::default(),
            &store,
        );
        assert!(matches!(err, Err(Error::MissingFeature(_))));
    }

    #[test]
    fn text_bounds_reject_with_reason() {
        let mut store = VectorStore::new(3);
        let mut pairs = vec![pair("a", 300, false, "h1"), pair("b", 300, false, "h2")];
        pairs[1].text = "x".into();
        add_pair_features(&mut store, "a", 0.9);
        add_pair_features(&mut store, "b", 0.9);
        let cfg = CuratorConfig {
            text: TextBounds {
                min_length: Some(3),
                ..Default::default()
            },
            ..Default::default()
        };
        let (kept, ledger, _) = filter_pairs(&pairs, &cfg, &store).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(ledger.count("text_stats"), 1);
    }

    #[test]
    fn text_stats_counts() {
        let mut ps = vec![pair("a", 1, false, "1"), pair("b", 1, false, "2")];
        ps[0].text = "red car".into();
        ps[1].text = "red car".into();
        let s = text_stats(&ps);
        assert_eq!(s[0].length, 7);
        assert_eq!(s[0].full_text_frequency, 2);
        assert!((s[0].unigram_score - 2f64.log10()).abs() < 1e-12);
        assert!((s[0].bigram_score - 2f64.log10()).abs() < 1e-12);
    }

    fn linked(id: &str, entities: &[&str]) -> LinkedPair {
        LinkedPair {
            pair: pair(id, 300, false, id),
            spans: entities
                .iter()
                .enumerate()
                .map(|(i, e)| LinkedSpan {
                    entity_id: e.to_string(),
                    probability: 1.0,
                    start: i,
                    end: i + 1,
                })
                .collect(),
        }
    }

    fn honda_kb() -> KnowledgeBase {
        KnowledgeBase::parse(
            "Q1420\tHonda Civic\tautomobile\thonda civic\t1\nQ65\tLos Angeles\t\tla\t1\n",
        )
        .unwrap()
    }

    #[test]
    fn scoring_keeps_relevant_entities() {
        let kb = honda_kb();
        let mut images = VectorStore::new(3);
        images.insert_f64("car", &[1.0, 0.0, 0.0]).unwrap();
        let mut ents = VectorStore::new(3);
        // Hand-built: cos(image, civic) = 0.31, cos(image, LA) = 0.12.
        ents.insert_f64("Q1420", &[0.31, (1.0f64 - 0.31 * 0.31).sqrt(), 0.0])
            .unwrap();
        ents.insert_f64("Q65", &[0.12, 0.0, (1.0f64 - 0.12 * 0.12).sqrt()])
            .unwrap();
        let (out, ledger) = score_entities(
            &[linked("car", &["Q1420", "Q65"])],
            &kb,
            &images,
            &ents,
            &CuratorConfig::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].entity_labels.len(), 1);
        assert_eq!(out[0].entity_labels[0].0, "Q1420");
        assert!((out[0].entity_labels[0].1 - 0.31).abs() < 1e-6);
        assert_eq!(ledger.assignments.count("below_threshold"), 1);
        assert!(ledger.assignments.reconciles() && ledger.examples.reconciles());
    }

    #[test]
    fn scoring_drops_empty_and_counts_missing() {
        let kb = honda_kb();
        let mut images = VectorStore::new(3);
        images.insert_f64("car", &[1.0, 0.0, 0.0]).unwrap();
        let ents = VectorStore::new(3);
        let (out, ledger) = score_entities(
            &[linked("car", &["Q1420", "Q1420"])],
            &kb,
            &images,
            &ents,
            &CuratorConfig::default(),
        )
        .unwrap();
        assert!(out.is_empty());
        assert_eq!(ledger.assignments.count("missing_embedding"), 1);
        assert_eq!(ledger.examples.count("no_entities"), 1);
    }

    #[test]
    fn empty_description_scores_on_name() {
        let kb = honda_kb();
        let mut images = VectorStore::new(3);
        images.insert_f64("car", &[1.0, 0.0, 0.0]).unwrap();
        let seen = std::sync::Mutex::new(Vec::new());
        let embed = |_: &str, text: &str| {
            seen.lock().unwrap().push(text.to_string());
            Some(vec![1.0, 0.0, 0.0])
        };
        score_entities(
            &[linked("car", &["Q65", "Q1420"])],
            &kb,
            &images,
            &embed,
            &CuratorConfig::default(),
        )
        .unwrap();
        assert_eq!(
            *seen.lock().unwrap(),
            vec!["Los Angeles", "Honda Civic, automobile"]
        );
    }

    fn ex(image: &str, ents: &[&str]) -> I2EExample {
        I2EExample {
            image_id: image.into(),
            entity_labels: ents.iter().map(|e| (e.to_string(), 0.5)).collect(),
            text: String::new(),
        }
    }

    #[test]
    fn build_removes_rare_entities() {
        let mut examples = Vec::new();
        for i in 0..4 {
            examples.push(ex(&format!("a{i}"), &["four"]));
        }
        for i in 0..5 {
            examples.push(ex(&format!("b{i}"), &["five"]));
        }
        examples.push(ex("mixed", &["four", "five"]));
        let cfg = CuratorConfig::default();
        let (out, hist, ledger) = build_i2e(&examples, &cfg).unwrap();
        // "four" now has 5 images (incl. mixed) so use a cleaner split below.
        assert_eq!(out.len(), 10);
        assert!(ledger.entities.reconciles() && ledger.examples.reconciles());
        assert_eq!(hist.counts.iter().sum::<usize>(), 2);

        let examples: Vec<I2EExample> = examples
            .into_iter()
            .filter(|e| e.image_id != "mixed")
            .collect();
        let (out, hist, ledger) = build_i2e(&examples, &cfg).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|e| e.entity_labels[0].0 == "five"));
        assert_eq!(hist.counts, [1, 1, 0, 0, 0, 0]);
        assert_eq!(ledger.entities.count("too_few_images"), 1);
        assert_eq!(ledger.examples.count("no_entities"), 4);
        // Idempotent on its own output.
        let (again, _, _) = build_i2e(&out, &cfg).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn histogram_buckets_and_empty_input() {
        let h = EntityHistogram::from_counts(&[
            0, 4, 5, 9, 10, 99, 100, 999, 1000, 9999, 10000, 5_000_000,
        ]);
        assert_eq!(h.counts, [2, 2, 2, 2, 2, 2]);
        let rows = h.rows();
        assert_eq!(rows[0], (0, Some(5), 2));
        assert_eq!(rows[5], (10000, None, 2));
        assert!(h.to_tsv().ends_with("10000\tinf\t2\n"));
        let (out, hist, _) = build_i2e(&[], &CuratorConfig::default()).unwrap();
        assert!(out.is_empty());
        assert_eq!(hist.counts, [0; 6]);
    }

    #[test]
    fn top_entities_by_count() {
        let examples = vec![
            ex("1", &["a", "b"]),
            ex("2", &["a"]),
            ex("3", &["c"]),
            ex("4", &["b"]),
        ];
        let top = keep_top_entities(&examples, 2);
        assert_eq!(top.len(), 3);
        assert!(top
            .iter()
            .all(|e| e.entity_labels.iter().all(|l| l.0 != "c")));
        assert_eq!(keep_top_entities(&examples, 10), examples);
    }

    #[test]
    fn i2e_line_round_trip() {
        let e = I2EExample {
            image_id: "img".into(),
            entity_labels: vec![("Q1".into(), 0.3125), ("Q2".into(), 0.25)],
            text: "some text: with colon".into(),
        };
        let line = e.to_line();
        assert_eq!(line, "img\tQ1:0.3125|Q2:0.25\tsome text: with colon");
        assert_eq!(I2EExample::parse_line(&line, 1).unwrap(), e);
        assert!(I2EExample::parse_line("img\tQ1\tx", 3)
            .unwrap_err()
            .to_string()
            .contains("line 3"));
    }

    #[test]
    fn validator_flags_violations() {
        let mut e = ex("x", &[]);
        assert_eq!(validate_i2e(&[e.clone()], 0.24).len(), 1);
        e.entity_labels.push(("Q".into(), 0.1));
        assert_eq!(validate_i2e(&[e], 0.24).len(), 1);
    }

    fn merge_fixture(n: usize) -> (Vec<I2EExample>, Vec<ImageTextPair>, KnowledgeBase) {
        let kb = KnowledgeBase::parse("Q1\tjeans\tdenim trousers\tjeans\t1\n").unwrap();
        let i2e = (0..n).map(|i| ex(&format!("i{i}"), &["Q1"])).collect();
        let pairs = (0..n)
            .map(|i| pair(&format!("i{i}"), 300, false, "h"))
            .collect();
        (i2e, pairs, kb)
    }

    #[test]
    fn mixed_mode_is_balanced_and_deterministic() {
        let (i2e, pairs, kb) = merge_fixture(10_000);
        let a = merge_i2t(&i2e, &pairs, &kb, MixMode::Mixed, 42).unwrap();
        let b = merge_i2t(&i2e, &pairs, &kb, MixMode::Mixed, 42).unwrap();
        assert_eq!(a, b);
        let frac = a
            .iter()
            .filter(|e| e.text_source == TextSource::Entity)
            .count() as f64
            / 1e4;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
        let e = a
            .iter()
            .find(|e| e.text_source == TextSource::Entity)
            .unwrap();
        assert_eq!(e.text, "jeans, denim trousers");
        assert_eq!(e.text_key, "Q1");
    }

    #[test]
    fn i2e_only_never_emits_alt_text() {
        let (i2e, pairs, kb) = merge_fixture(100);
        let out = merge_i2t(&i2e, &pairs, &kb, MixMode::I2eOnly, 1).unwrap();
        assert!(out.iter().all(|e| e.text_source == TextSource::Entity));
        let err = merge_i2t(&i2e, &pairs[..10], &kb, MixMode::I2eOnly, 1);
        assert!(err.is_err());
    }
}
