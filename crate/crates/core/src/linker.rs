//! Entity extraction and disambiguation over free text.
//!
//! Candidate spans come from every token n-gram found in the alias table.
//! Ambiguous spans are resolved iteratively: the text is summarized as the
//! probability-weighted mean of all candidate embeddings (projected into the
//! Poincaré ball), and each candidate's probability is reset to its prior
//! times `exp(-d(e_c, E) / tau_sim)`, renormalized per span. Iteration stops
//! once no probability moves by more than `epsilon`.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curator::ImageTextPair;
use crate::error::{Error, Result};
use crate::hyperembed::{poincare_distance, project_to_ball, PoincareEmbedding};
use crate::kb::{AliasTable, KnowledgeBase};
use crate::text::tokenize;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkerConfig {
    pub max_iters: usize,
    pub epsilon: f64,
    pub tau_sim: f64,
    pub selection_threshold: f64,
    /// Whether a span's own candidates contribute to the text embedding used
    /// to update that span.
    pub include_self: bool,
}

impl Default for LinkerConfig {
    fn default() -> Self {
        LinkerConfig {
            max_iters: 20,
            epsilon: 1e-4,
            tau_sim: 1.0,
            selection_threshold: 0.5,
            include_self: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub entity_id: String,
    pub prior: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSpan {
    /// Token range `[start, end)`.
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub candidates: Vec<Candidate>,
    pub converged: bool,
}

impl CandidateSpan {
    fn top_prior(&self) -> f64 {
        self.candidates.iter().map(|c| c.prior).fold(0.0, f64::max)
    }

    fn len(&self) -> usize {
        self.end - self.start
    }

    /// Highest-probability candidate; ties go to the smaller entity id.
    pub fn best(&self) -> Option<&Candidate> {
        self.candidates.iter().min_by(|a, b| {
            b.probability
                .total_cmp(&a.probability)
                .then_with(|| a.entity_id.cmp(&b.entity_id))
        })
    }

    pub fn probability_of(&self, entity_id: &str) -> Option<f64> {
        self.candidates
            .iter()
            .find(|c| c.entity_id == entity_id)
            .map(|c| c.probability)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkedSpan {
    #[serde(rename = "id")]
    pub entity_id: String,
    #[serde(rename = "p")]
    pub probability: f64,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkResult {
    pub text: String,
    pub spans: Vec<LinkedSpan>,
    pub iterations_used: usize,
}

/// Finds alias-table matches over all token n-grams and resolves overlaps:
/// longer spans win, then leftmost, then the one with the higher top prior.
pub fn generate_candidates(text: &str, table: &AliasTable) -> Vec<CandidateSpan> {
    let tokens = tokenize(text);
    let mut found = Vec::new();
    for n in 1..=table.max_ngram().min(tokens.len()) {
        for start in 0..=tokens.len() - n {
            let surface = tokens[start..start + n].join(" ");
            let cands = table.lookup(&surface);
            if cands.is_empty() {
                continue;
            }
            found.push(CandidateSpan {
                start,
                end: start + n,
                surface,
                candidates: cands
                    .iter()
                    .map(|(id, p)| Candidate {
                        entity_id: id.clone(),
                        prior: *p,
                        probability: *p,
                    })
                    .collect(),
                converged: false,
            });
        }
    }
    found.sort_by(|a, b| {
        b.len()
            .cmp(&a.len())
            .then_with(|| a.start.cmp(&b.start))
            .then_with(|| b.top_prior().total_cmp(&a.top_prior()))
    });
    let mut taken = vec![false; tokens.len()];
    let mut kept = Vec::new();
    for span in found {
        if taken[span.start..span.end].iter().any(|&t| t) {
            continue;
        }
        taken[span.start..span.end]
            .iter_mut()
            .for_each(|t| *t = true);
        kept.push(span);
    }
    kept.sort_by_key(|s| s.start);
    kept
}

/// Weighted Euclidean mean of candidate embeddings, projected into the ball.
/// Spans flagged in `skip` are left out. Returns `None` when nothing is left.
fn text_embedding(
    spans: &[CandidateSpan],
    points: &[Vec<&[f64]>],
    skip: Option<usize>,
    dim: usize,
    max_norm: f64,
) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; dim];
    let mut total = 0.0;
    for (si, span) in spans.iter().enumerate() {
        if Some(si) == skip {
            continue;
        }
        for (c, p) in span.candidates.iter().zip(&points[si]) {
            total += c.probability;
            acc.iter_mut()
                .zip(p.iter())
                .for_each(|(a, x)| *a += c.probability * x);
        }
    }
    if total <= 0.0 {
        return None;
    }
    acc.iter_mut().for_each(|a| *a /= total);
    project_to_ball(&mut acc, max_norm);
    Some(acc)
}

/// Iteratively refines candidate probabilities against the text embedding.
///
/// Candidates without an embedding are dropped first (priors renormalized
/// over the survivors) and spans left empty are discarded. Returns the
/// refined spans and the number of iterations run.
pub fn disambiguate(
    spans: Vec<CandidateSpan>,
    emb: &PoincareEmbedding,
    config: &LinkerConfig,
) -> Result<(Vec<CandidateSpan>, usize)> {
    if !(config.tau_sim > 0.0) {
        return Err(Error::invalid("tau_sim must be positive"));
    }
    let mut spans: Vec<CandidateSpan> = spans
        .into_iter()
        .filter_map(|mut s| {
            s.candidates.retain(|c| emb.get(&c.entity_id).is_some());
            let total: f64 = s.candidates.iter().map(|c| c.prior).sum();
            if s.candidates.is_empty() {
                return None;
            }
            let n = s.candidates.len() as f64;
            for c in &mut s.candidates {
                c.prior = if total > 0.0 {
                    c.prior / total
                } else {
                    1.0 / n
                };
                c.probability = c.prior;
            }
            Some(s)
        })
        .collect();
    if spans.is_empty() {
        return Ok((spans, 0));
    }
    let dim = emb.dim();
    let max_norm = emb.max_norm();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iters {
        iterations += 1;
        let points: Vec<Vec<&[f64]>> = spans
            .iter()
            .map(|s| {
                s.candidates
                    .iter()
                    .map(|c| emb.get(&c.entity_id).expect("filtered above"))
                    .collect()
            })
            .collect();
        let shared = if config.include_self {
            text_embedding(&spans, &points, None, dim, max_norm)
        } else {
            None
        };
        let mut updates: Vec<Vec<f64>> = Vec::with_capacity(spans.len());
        for (si, span) in spans.iter().enumerate() {
            let context = if config.include_self {
                shared.clone()
            } else {
                text_embedding(&spans, &points, Some(si), dim, max_norm)
            };
            let Some(context) = context else {
                updates.push(span.candidates.iter().map(|c| c.prior).collect());
                continue;
            };
            let mut logits = Vec::with_capacity(span.candidates.len());
            for (c, p) in span.candidates.iter().zip(&points[si]) {
                let d = poincare_distance(p, &context)?;
                logits.push(c.prior.ln() - d / config.tau_sim);
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            if !z.is_finite() || z <= 0.0 || w.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "span {:?} [{}, {}) iteration {iterations}: weights {w:?}",
                    span.surface, span.start, span.end
                )));
            }
            updates.push(w.into_iter().map(|x| x / z).collect());
        }
        let mut max_change: f64 = 0.0;
        for (span, new) in spans.iter_mut().zip(updates) {
            for (c, p) in span.candidates.iter_mut().zip(new) {
                max_change = max_change.max((c.probability - p).abs());
                c.probability = p;
            }
        }
        if max_change < config.epsilon {
            converged = true;
            break;
        }
    }
    for s in &mut spans {
        s.converged = converged;
    }
    Ok((spans, iterations))
}

/// Links one text: candidates, disambiguation, then argmax per span with
/// spans below `selection_threshold` dropped.
pub fn link_text(
    text: &str,
    kb: &KnowledgeBase,
    emb: &PoincareEmbedding,
    config: &LinkerConfig,
) -> Result<LinkResult> {
    let spans = generate_candidates(text, kb.aliases());
    let (spans, iterations_used) = disambiguate(spans, emb, config)?;
    let resolved = spans
        .iter()
        .filter_map(|s| {
            let best = s.best()?;
            (best.probability >= config.selection_threshold).then(|| LinkedSpan {
                entity_id: best.entity_id.clone(),
                probability: best.probability,
                start: s.start,
                end: s.end,
            })
        })
        .collect();
    Ok(LinkResult {
        text: text.to_string(),
        spans: resolved,
        iterations_used,
    })
}

/// A pair record with its linked entities, as written by [`link_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinkedPair {
    pub pair: ImageTextPair,
    pub spans: Vec<LinkedSpan>,
}

impl LinkedPair {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}",
            self.pair.to_line(),
            serde_json::to_string(&self.spans).expect("spans serialize")
        )
    }

    /// Parses one linked-corpus line: the six pair columns plus a JSON span
    /// list.
    pub fn parse_line(line: &str, lineno: usize) -> Result<Self> {
        const WHAT: &str = "linked corpus";
        let (head, json) = line
            .rsplit_once('\t')
            .ok_or_else(|| Error::parse(WHAT, lineno, "missing span column"))?;
        let pair = ImageTextPair::parse_line(head, lineno)?;
        let spans: Vec<LinkedSpan> = serde_json::from_str(json)
            .map_err(|e| Error::parse(WHAT, lineno, format!("bad span JSON: {e}")))?;
        for s in &spans {
            if s.end <= s.start || !(0.0..=1.0).contains(&s.probability) {
                return Err(Error::parse(WHAT, lineno, format!("invalid span {s:?}")));
            }
        }
        Ok(LinkedPair { pair, spans })
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

#[derive(Debug, Clone, Default, Serialize)]
pub struct LinkSummary {
    pub records: usize,
    pub linked_spans: usize,
    pub empty_texts: usize,
    pub seconds: f64,
    pub texts_per_sec: f64,
}

const CHUNK: usize = 4096;

/// Streams a pair file, links every text and writes each record followed by
/// a JSON span column. Records keep input order, so the output does not
/// depend on `shards` (the worker count).
pub fn link_corpus(
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
    kb: &KnowledgeBase,
    emb: &PoincareEmbedding,
    config: &LinkerConfig,
    shards: usize,
) -> Result<LinkSummary> {
    let (input, output) = (input.as_ref(), output.as_ref());
    let reader = BufReader::new(std::fs::File::open(input).map_err(|e| Error::io(input, e))?);
    let file = std::fs::File::create(output).map_err(|e| Error::io(output, e))?;
    let mut writer = BufWriter::new(file);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(shards.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let started = Instant::now();
    let mut summary = LinkSummary::default();
    let mut chunk: Vec<(usize, usize, String)> = Vec::with_capacity(CHUNK);
    let mut record = 0usize;

    let flush = |chunk: &mut Vec<(usize, usize, String)>,
                 writer: &mut BufWriter<std::fs::File>,
                 summary: &mut LinkSummary|
     -> Result<()> {
        let linked: Vec<Result<LinkedPair>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|(rec, lineno, line)| {
                    let pair = ImageTextPair::parse_line(line, *lineno)
                        .map_err(|e| Error::invalid(format!("record {rec}: {e}")))?;
                    let res = link_text(&pair.text, kb, emb, config)
                        .map_err(|e| Error::invalid(format!("record {rec}: {e}")))?;
                    Ok(LinkedPair {
                        pair,
                        spans: res.spans,
                    })
                })
                .collect()
        });
        for lp in linked {
            let lp = lp?;
            summary.records += 1;
            summary.linked_spans += lp.spans.len();
            if lp.pair.text.trim().is_empty() {
                summary.empty_texts += 1;
            }
            writeln!(writer, "{}", lp.to_line()).map_err(|e| Error::io(output, e))?;
        }
        chunk.clear();
        Ok(())
    };

    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(input, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        chunk.push((record, i + 1, line));
        record += 1;
        if chunk.len() == CHUNK {
            flush(&mut chunk, &mut writer, &mut summary)?;
        }
    }
    flush(&mut chunk, &mut writer, &mut summary)?;
    writer.flush().map_err(|e| Error::io(output, e))?;
    summary.seconds = started.elapsed().as_secs_f64();
    summary.texts_per_sec = summary.records as f64 / summary.seconds.max(1e-9);
    Ok(summary)
}
