//! Deterministic toy world standing in for a web-crawled corpus.
//!
//! Entities belong to topics. Each entity has a concept direction
//! `normalize(topic + topic_spread * own)` in the first `dim - style_dims`
//! coordinates. An image is its entity's concept plus isotropic noise plus a
//! heavy "style" component drawn from a few shared directions in the last
//! `style_dims` coordinates. Raw cosine is then dominated by style, so
//! retrieval in the input space (or through a random encoder) mostly
//! matches style rather than entity.
//!
//! Alt-text features are noisy and lean toward the topic; entity text
//! features (keyed by entity id) are close to the concept direction.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{bail, Context, Result};
use i2e_core::curator::ImageTextPair;
use i2e_core::hyperembed::LinkGraph;
use i2e_core::kb::{EntityRecord, KnowledgeBase};
use i2e_core::store::VectorStore;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::files;
use crate::io::{write_atomic, EvalLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub entities: usize,
    pub topics: usize,
    /// Images per regular entity, held-out ones included.
    pub images_per_entity: usize,
    /// Images per regular entity reserved for the evaluation split.
    pub heldout_per_entity: usize,
    pub dim: usize,
    pub style_dims: usize,
    pub styles: usize,
    pub style_weight: f64,
    /// Norm of the per-image concept noise.
    pub spread: f64,
    /// Weight of an entity's own direction relative to its topic's.
    pub topic_spread: f64,
    /// Norm of the noise added to alt-text features.
    pub text_noise: f64,
    /// Weight of the entity's own direction in its alt-text features.
    pub alt_text_specificity: f64,
    /// Weight of the image's scene (style) direction in its alt-text
    /// features: captions describe the scene as well as the subject.
    pub alt_text_scene_weight: f64,
    /// Entity pairs from different topics sharing one extra alias.
    pub ambiguity_pairs: usize,
    /// Image counts of extra noise-free entities (for threshold checks).
    pub tail_image_counts: Vec<usize>,
    /// Extra pairs whose alt-text feature has exactly this cosine with the
    /// image.
    pub probe_cosines: Vec<f64>,
    pub nsfw_rate: f64,
    pub small_rate: f64,
    pub duplicate_rate: f64,
    pub unrelated_rate: f64,
    pub comention_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            entities: 200,
            topics: 20,
            images_per_entity: 20,
            heldout_per_entity: 5,
            dim: 64,
            style_dims: 16,
            styles: 8,
            style_weight: 2.0,
            spread: 1.0,
            topic_spread: 1.5,
            text_noise: 0.8,
            alt_text_specificity: 0.5,
            alt_text_scene_weight: 0.5,
            ambiguity_pairs: 4,
            tail_image_counts: Vec::new(),
            probe_cosines: Vec::new(),
            nsfw_rate: 0.02,
            small_rate: 0.03,
            duplicate_rate: 0.02,
            unrelated_rate: 0.05,
            comention_rate: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.entities == 0 || self.topics == 0 || self.images_per_entity == 0 || self.styles == 0
        {
            bail!("synth: entity, topic, image, and style counts must be positive");
        }
        if self.topics > self.entities {
            bail!("synth: more topics than entities");
        }
        if self.heldout_per_entity >= self.images_per_entity {
            bail!("synth: heldout_per_entity must be below images_per_entity");
        }
        if self.style_dims == 0 || self.style_dims + 2 > self.dim {
            bail!("synth: style_dims must leave at least two concept dimensions");
        }
        if !(self.spread > 0.0) || !(self.topic_spread > 0.0) || !(self.text_noise >= 0.0) {
            bail!("synth: spreads must be positive");
        }
        if self.ambiguity_pairs > 0 && (self.topics < 2 || 2 * self.ambiguity_pairs > self.entities)
        {
            bail!("synth: ambiguity pairs need two topics and two entities each");
        }
        for r in [
            self.nsfw_rate,
            self.small_rate,
            self.duplicate_rate,
            self.unrelated_rate,
            self.comention_rate,
        ] {
            if !(0.0..=1.0).contains(&r) {
                bail!("synth: rates must lie in [0, 1]");
            }
        }
        if self.probe_cosines.iter().any(|c| !(-1.0..=1.0).contains(c)) {
            bail!("synth: probe cosines must lie in [-1, 1]");
        }
        Ok(())
    }
}

/// Generated artifacts, in memory.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub kb: KnowledgeBase,
    pub graph: LinkGraph,
    pub pairs: Vec<ImageTextPair>,
    pub features: VectorStore,
    pub eval: Vec<EvalLabel>,
}

const FILLER: [&str; 12] = [
    "photo", "of", "the", "a", "at", "with", "in", "picture", "shot", "near", "new", "my",
];
const PREFIXES: [&str; 4] = ["photo of", "a picture of", "my new", "shot of the"];
const SUFFIXES: [&str; 4] = ["at night", "in the park", "near home", "with friends"];
const ONSETS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn word(rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS.choose(rng).unwrap(),
                    VOWELS.choose(rng).unwrap()
                )
            })
            .collect();
        if !FILLER.contains(&w.as_str()) && taken.insert(w.clone()) {
            return w;
        }
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Random vector of norm `scale` supported on `range` inside a `dim` vector.
fn noise_in(
    rng: &mut ChaCha8Rng,
    dim: usize,
    range: std::ops::Range<usize>,
    scale: f64,
) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    let g = unit(gaussian(rng, range.len()));
    for (i, x) in range.zip(g) {
        v[i] = x * scale;
    }
    v
}

fn add(a: &[f64], b: &[f64], wb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + wb * y).collect()
}

struct Entity {
    id: String,
    name: String,
    topic: usize,
    own: Vec<f64>,
    concept: Vec<f64>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SynthWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let concept_dims = 0..d - spec.style_dims;
    let style_range = d - spec.style_dims..d;

    let mut taken = BTreeSet::new();
    let topic_words: Vec<String> = (0..spec.topics)
        .map(|_| word(&mut rng, &mut taken))
        .collect();
    let topic_vecs: Vec<Vec<f64>> = (0..spec.topics)
        .map(|_| noise_in(&mut rng, d, concept_dims.clone(), 1.0))
        .collect();
    let styles: Vec<Vec<f64>> = (0..spec.styles)
        .map(|_| noise_in(&mut rng, d, style_range.clone(), 1.0))
        .collect();

    let total = spec.entities + spec.tail_image_counts.len();
    let mut entities = Vec::with_capacity(total);
    let mut records = Vec::with_capacity(total);
    for i in 0..total {
        let topic = i % spec.topics;
        let own = noise_in(&mut rng, d, concept_dims.clone(), 1.0);
        let concept = unit(add(&topic_vecs[topic], &own, spec.topic_spread));
        let name = capitalize(&word(&mut rng, &mut taken));
        let alias = word(&mut rng, &mut taken);
        let id = format!("Q{}", 1000 + i);
        records.push(EntityRecord {
            entity_id: id.clone(),
            name: name.clone(),
            description: format!("a kind of {}", topic_words[topic]),
            aliases: [alias].into_iter().collect(),
            popularity: rng.random_range(1..=100) as f64,
        });
        entities.push(Entity {
            id,
            name,
            topic,
            own,
            concept,
        });
    }
    // Entities 2k and 2k+1 sit in adjacent topics and share an alias.
    let mut ambiguous: BTreeMap<usize, String> = BTreeMap::new();
    for k in 0..spec.ambiguity_pairs {
        let shared = word(&mut rng, &mut taken);
        for e in [2 * k, 2 * k + 1] {
            records[e].aliases.insert(shared.clone());
            records[e].popularity = 50.0;
            ambiguous.insert(e, shared.clone());
        }
    }

    let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); spec.topics];
    for (i, e) in entities.iter().enumerate() {
        by_topic[e.topic].push(i);
    }
    let mut graph = LinkGraph::new();
    for e in &entities {
        graph.add_node(&e.id);
    }
    for members in &by_topic {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                graph.add_edge(&entities[i].id, &entities[j].id, 1)?;
            }
        }
    }
    for t in 0..spec.topics {
        let (a, b) = (by_topic[t][0], by_topic[(t + 1) % spec.topics][0]);
        if a != b {
            graph.add_edge(&entities[a].id, &entities[b].id, 1)?;
        }
    }

    let mut features = VectorStore::new(d);
    for e in &entities {
        let noisy = add(&e.concept, &noise_in(&mut rng, d, 0..d, 1.0), 0.1);
        features.insert_f64(&e.id, &unit(noisy))?;
    }

    let image = |rng: &mut ChaCha8Rng, e: &Entity| -> (Vec<f64>, usize) {
        let s = rng.random_range(0..styles.len());
        let x = add(
            &e.concept,
            &noise_in(rng, d, concept_dims.clone(), spec.spread),
            1.0,
        );
        (unit(add(&x, &styles[s], spec.style_weight)), s)
    };

    let mut pairs = Vec::new();
    let mut eval = Vec::new();
    for (ei, e) in entities.iter().enumerate() {
        let tail = ei >= spec.entities;
        let count = if tail {
            spec.tail_image_counts[ei - spec.entities]
        } else {
            spec.images_per_entity
        };
        let heldout = if tail { 0 } else { spec.heldout_per_entity };
        let mut prev_hash: Option<String> = None;
        for j in 0..count {
            let (x, scene) = image(&mut rng, e);
            if j < heldout {
                let id = format!("h{ei:04}_{j:02}");
                features.insert_f64(&id, &x)?;
                eval.push(EvalLabel {
                    image_id: id,
                    entity_id: e.id.clone(),
                });
                continue;
            }
            let id = format!("i{ei:04}_{j:02}");
            let noisy = !tail;
            let mention = match ambiguous.get(&ei) {
                Some(shared) if rng.random_bool(0.5) => {
                    let mates: Vec<usize> = by_topic[e.topic]
                        .iter()
                        .copied()
                        .filter(|&m| m != ei)
                        .collect();
                    match mates.choose(&mut rng) {
                        Some(&m) => format!("{shared} and {}", entities[m].name),
                        None => shared.clone(),
                    }
                }
                _ => {
                    if rng.random_bool(0.5) {
                        e.name.clone()
                    } else {
                        records[ei].aliases.iter().next().unwrap().clone()
                    }
                }
            };
            let mut text = format!(
                "{} {} {}",
                PREFIXES.choose(&mut rng).unwrap(),
                mention,
                SUFFIXES.choose(&mut rng).unwrap()
            );
            let mut t = unit(add(
                &topic_vecs[e.topic],
                &e.own,
                spec.alt_text_specificity * spec.topic_spread,
            ));
            if noisy && rng.random_bool(spec.comention_rate) {
                let other = rng.random_range(0..spec.entities);
                if other != ei {
                    text.push_str(&format!(" with {}", entities[other].name));
                    t = add(&t, &entities[other].concept, 0.5);
                }
            }
            t = add(&t, &styles[scene], spec.alt_text_scene_weight);
            t = add(
                &t,
                &noise_in(&mut rng, d, concept_dims.clone(), spec.text_noise),
                1.0,
            );
            if noisy && rng.random_bool(spec.unrelated_rate) {
                t = noise_in(&mut rng, d, 0..d, 1.0);
            }
            let key = format!("t:{id}");
            features.insert_f64(&id, &x)?;
            features.insert_f64(&key, &unit(t))?;
            let nsfw = noisy && rng.random_bool(spec.nsfw_rate);
            let min_dim_px = if noisy && rng.random_bool(spec.small_rate) {
                rng.random_range(64..200)
            } else {
                rng.random_range(200..1024)
            };
            let image_hash = match &prev_hash {
                Some(h) if noisy && rng.random_bool(spec.duplicate_rate) => h.clone(),
                _ => format!("{:016x}", rng.random::<u64>()),
            };
            prev_hash = Some(image_hash.clone());
            pairs.push(ImageTextPair {
                image_id: id,
                text,
                min_dim_px,
                nsfw,
                image_hash,
                feature_key: key,
            });
        }
    }

    for (k, &c) in spec.probe_cosines.iter().enumerate() {
        let e = &entities[0];
        let (x, _) = image(&mut rng, e);
        // Text = c x + sqrt(1 - c^2) y with y a unit vector orthogonal to x.
        let r = gaussian(&mut rng, d);
        let proj: f64 = r.iter().zip(&x).map(|(a, b)| a * b).sum();
        let y = unit(add(&r, &x, -proj));
        let t = add(
            &x.iter().map(|v| v * c).collect::<Vec<_>>(),
            &y,
            (1.0 - c * c).sqrt(),
        );
        let id = format!("probe{k}");
        let key = format!("t:{id}");
        features.insert_f64(&id, &x)?;
        features.insert_f64(&key, &t)?;
        pairs.push(ImageTextPair {
            image_id: id,
            text: format!("photo of {}", e.name),
            min_dim_px: 512,
            nsfw: false,
            image_hash: format!("probe{k:012}"),
            feature_key: key,
        });
    }

    Ok(SynthWorld {
        kb: KnowledgeBase::from_records(records)?,
        graph,
        pairs,
        features,
        eval,
    })
}

impl SynthWorld {
    pub fn write(&self, out: &Path, spec: &SyntheticSpec) -> Result<()> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_atomic(&out.join(files::KB), self.kb.to_tsv().as_bytes())?;
        write_atomic(&out.join(files::GRAPH), self.graph.to_tsv().as_bytes())?;
        let pairs: String = self.pairs.iter().map(|p| p.to_line() + "\n").collect();
        write_atomic(&out.join(files::PAIRS), pairs.as_bytes())?;
        write_atomic(&out.join(files::FEATURES), &self.features.encode())?;
        write_atomic(
            &out.join(files::EVAL),
            EvalLabel::to_tsv(&self.eval).as_bytes(),
        )?;
        let mut json = serde_json::to_string_pretty(spec)?;
        json.push('\n');
        write_atomic(&out.join(files::SYNTH_SPEC), json.as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use i2e_core::vector::cosine;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            entities: 20,
            topics: 4,
            images_per_entity: 10,
            heldout_per_entity: 2,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let (a, b) = (generate(&small()).unwrap(), generate(&small()).unwrap());
        assert_eq!(a.features.encode(), b.features.encode());
        assert_eq!(a.kb.to_tsv(), b.kb.to_tsv());
        assert_eq!(a.pairs, b.pairs);
        let other = generate(&SyntheticSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.features.encode(), other.features.encode());
    }

    #[test]
    fn ambiguity_pairs_share_an_alias() {
        let w = generate(&small()).unwrap();
        let recs = w.kb.records();
        let shared: Vec<&String> = recs[0].aliases.intersection(&recs[1].aliases).collect();
        assert_eq!(shared.len(), 1);
        assert_eq!(w.kb.lookup(shared[0]).len(), 2);
    }

    #[test]
    fn counts_and_split() {
        let spec = SyntheticSpec {
            tail_image_counts: vec![4, 5],
            ..small()
        };
        let w = generate(&spec).unwrap();
        assert_eq!(w.eval.len(), 20 * 2);
        assert_eq!(w.pairs.len(), 20 * 8 + 9);
        assert_eq!(w.kb.len(), 22);
        let tail: Vec<_> = w
            .pairs
            .iter()
            .filter(|p| p.image_id.starts_with("i0020"))
            .collect();
        assert_eq!(tail.len(), 4);
    }

    #[test]
    fn probes_have_exact_cosines() {
        let spec = SyntheticSpec {
            probe_cosines: vec![0.239, 0.241],
            ..small()
        };
        let w = generate(&spec).unwrap();
        for (k, want) in [0.239, 0.241].iter().enumerate() {
            let img = w.features.get_f64(&format!("probe{k}")).unwrap();
            let txt = w.features.get_f64(&format!("t:probe{k}")).unwrap();
            assert!((cosine(&img, &txt) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn entity_text_scores_above_threshold() {
        let w = generate(&small()).unwrap();
        let c = cosine(
            &w.features.get_f64("i0000_05").unwrap(),
            &w.features.get_f64("Q1000").unwrap(),
        );
        assert!(c > 0.3, "{c}");
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&SyntheticSpec {
            entities: 0,
            ..small()
        })
        .is_err());
        assert!(generate(&SyntheticSpec {
            spread: 0.0,
            ..small()
        })
        .is_err());
        assert!(generate(&SyntheticSpec {
            heldout_per_entity: 10,
            ..small()
        })
        .is_err());
    }
}
