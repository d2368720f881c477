//! Entity-supervised, contrastive, and multi-task training over precomputed
//! image and text features.
//!
//! The image tower feeds both objectives. The classification head is a
//! matrix of unit-norm class rows; each step scores the batch against a
//! sampled class set of size `N` (batch classes plus uniform negatives).
//! The contrastive term uses a learnable temperature stored as `log τ` and
//! clamped to `[tau_min, tau_max]`.
//!
//! `contrast_loss` sums over the batch while `class_loss` averages, so the
//! trainer divides the contrastive term by the batch size before mixing.
//! Both terms are then per-example and keep the same relative weight as
//! batch sums of both would.

mod checkpoint;
mod encoder;
mod loss;
mod optim;
mod sampler;
mod schedule;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC};
pub use encoder::{Tower, TowerCache, TowerGrads};
pub use loss::{
    class_loss, class_loss_unchecked, combine_grads, combined_loss, contrast_loss,
    contrast_loss_unchecked, normalize_rows, row_norms, ClassLoss, ContrastLoss,
    UNIT_NORM_TOLERANCE,
};
pub use optim::{AdamWConfig, Moments};
pub use sampler::sample_classes;
pub use schedule::lr_schedule;

use crate::curator::CombinedExample;
use crate::error::{Error, Result};
use crate::store::VectorStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Recipe {
    /// Margin softmax over entity labels only.
    Sup,
    /// Image-text contrastive only.
    Clip,
    /// Both, weighted by `lambda`.
    #[default]
    Mofi,
}

impl Recipe {
    pub fn uses_class(self) -> bool {
        matches!(self, Recipe::Sup | Recipe::Mofi)
    }

    pub fn uses_contrast(self) -> bool {
        matches!(self, Recipe::Clip | Recipe::Mofi)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::Sup => "sup",
            Recipe::Clip => "clip",
            Recipe::Mofi => "mofi",
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sup" => Ok(Recipe::Sup),
            "clip" => Ok(Recipe::Clip),
            "mofi" => Ok(Recipe::Mofi),
            other => Err(Error::invalid(format!("unknown recipe {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub recipe: Recipe,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub batch_size: usize,
    /// Sampled class budget `N`; capped at the number of classes.
    pub num_sampled_classes: usize,
    /// Score every class each step instead of sampling.
    pub full_softmax: bool,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub margin: f64,
    pub class_temperature: f64,
    pub lambda: f64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Verify unit norms of outputs and class rows after every step.
    pub check_invariants: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            recipe: Recipe::Mofi,
            hidden_dim: 128,
            embed_dim: 32,
            batch_size: 256,
            num_sampled_classes: 1024,
            full_softmax: false,
            peak_lr: 1e-3,
            warmup_steps: 200,
            total_steps: 2000,
            margin: 0.15,
            class_temperature: 1.0 / 32.0,
            lambda: 0.5,
            tau_init: 0.07,
            tau_min: 1e-3,
            tau_max: 10.0,
            optimizer: AdamWConfig::default(),
            seed: 0,
            check_invariants: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::invalid(
                "batch size and layer widths must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda must lie in [0, 1]"));
        }
        if self.warmup_steps >= self.total_steps && self.total_steps > 0 {
            return Err(Error::invalid(
                "warmup_steps must be smaller than total_steps",
            ));
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_init && self.tau_init <= self.tau_max) {
            return Err(Error::invalid(
                "tau_init must lie in [tau_min, tau_max] with tau_min > 0",
            ));
        }
        if !(self.class_temperature > 0.0) || !(self.peak_lr > 0.0) {
            return Err(Error::invalid(
                "class temperature and peak lr must be positive",
            ));
        }
        Ok(())
    }
}

/// Training examples resolved to dense features.
#[derive(Debug, Clone)]
pub struct TrainCorpus {
    pub image_ids: Vec<String>,
    pub images: Array2<f64>,
    /// Contrastive text features, one row per example.
    pub texts: Array2<f64>,
    /// Class indices per example (into `classes`).
    pub labels: Vec<Vec<usize>>,
    /// Sorted entity ids.
    pub classes: Vec<String>,
}

impl TrainCorpus {
    /// Resolves image features by image id and text features by each
    /// example's `text_key`.
    pub fn from_examples(examples: &[CombinedExample], store: &VectorStore) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("training corpus is empty"));
        }
        let classes: Vec<String> = examples
            .iter()
            .flat_map(|e| e.labels.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let class_index: BTreeMap<&str, usize> = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let d = store.dim();
        let mut images = Array2::zeros((examples.len(), d));
        let mut texts = Array2::zeros((examples.len(), d));
        let mut labels = Vec::with_capacity(examples.len());
        for (i, e) in examples.iter().enumerate() {
            let img = store.require(&e.image_id)?;
            let txt = store.require(&e.text_key)?;
            images.row_mut(i).assign(&ndarray::ArrayView1::from(&img));
            texts.row_mut(i).assign(&ndarray::ArrayView1::from(&txt));
            if e.labels.is_empty() {
                return Err(Error::invalid(format!(
                    "example {:?} has no labels",
                    e.image_id
                )));
            }
            labels.push(e.labels.iter().map(|l| class_index[l.as_str()]).collect());
        }
        Ok(TrainCorpus {
            image_ids: examples.iter().map(|e| e.image_id.clone()).collect(),
            images,
            texts,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.images.ncols()
    }
}

/// Everything needed to resume or evaluate a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub config: TrainerConfig,
    pub image: Tower,
    pub text: Tower,
    pub class_weights: Array2<f64>,
    pub classes: Vec<String>,
    pub log_tau: f64,
    pub step: usize,
    moments: Vec<Moments>,
}

/// One row of the metrics log. Losses absent from the recipe are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss_class: Option<f64>,
    pub loss_contrast: Option<f64>,
    pub loss_total: f64,
    pub tau: f64,
}

pub const METRICS_HEADER: &str = "step,lr,loss_class,loss_contrast,loss_total,tau";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.lr,
            opt(self.loss_class),
            opt(self.loss_contrast),
            self.loss_total,
            self.tau
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

const TOWERS: [&str; 2] = ["image", "text"];

impl TrainerState {
    /// Random initialization for a corpus with `input_dim` features and the
    /// given class list.
    pub fn init(config: &TrainerConfig, input_dim: usize, classes: Vec<String>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let image = Tower::init(input_dim, config.hidden_dim, config.embed_dim, &mut rng);
        let text = Tower::init(input_dim, config.hidden_dim, config.embed_dim, &mut rng);
        let mut class_weights = Array2::from_shape_fn((classes.len(), config.embed_dim), |_| {
            use rand::Rng;
            rng.random_range(-1.0..1.0)
        });
        normalize_rows(&mut class_weights);
        let mut moments = Vec::new();
        for t in [&image, &text] {
            for (_, _, data) in t.slices() {
                moments.push(Moments::new(data.len()));
            }
        }
        moments.push(Moments::new(class_weights.len()));
        moments.push(Moments::new(1));
        Ok(TrainerState {
            config: config.clone(),
            image,
            text,
            class_weights,
            classes,
            log_tau: config.tau_init.ln(),
            step: 0,
            moments,
        })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    /// Unit-norm image embeddings for a feature matrix.
    pub fn embed_images(&self, features: &Array2<f64>) -> Array2<f64> {
        self.image.embed(features.view())
    }

    pub fn embed_texts(&self, features: &Array2<f64>) -> Array2<f64> {
        self.text.embed(features.view())
    }

    /// Named parameter tensors in checkpoint order.
    pub fn named_slices(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (name, tower) in TOWERS.iter().zip([&self.image, &self.text]) {
            for (p, shape, data) in tower.slices() {
                out.push((format!("{name}.{p}"), shape, data));
            }
        }
        out.push((
            "class_weights".into(),
            self.class_weights.shape().to_vec(),
            self.class_weights.iter().copied().collect(),
        ));
        out.push(("log_tau".into(), vec![1], vec![self.log_tau]));
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_checkpoint(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        decode_checkpoint(bytes)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub(crate) fn from_parts(
        config: TrainerConfig,
        image: Tower,
        text: Tower,
        class_weights: Array2<f64>,
        classes: Vec<String>,
        log_tau: f64,
        step: usize,
    ) -> Self {
        let mut moments = Vec::new();
        for t in [&image, &text] {
            for (_, _, data) in t.slices() {
                moments.push(Moments::new(data.len()));
            }
        }
        moments.push(Moments::new(class_weights.len()));
        moments.push(Moments::new(1));
        TrainerState {
            config,
            image,
            text,
            class_weights,
            classes,
            log_tau,
            step,
            moments,
        }
    }

    fn apply_tower_grads(&mut self, which: usize, g: &TowerGrads, lr: f64, t: usize) {
        let cfg = self.config.optimizer;
        let tower = if which == 0 {
            &mut self.image
        } else {
            &mut self.text
        };
        let base = which * 4;
        let m = &mut self.moments;
        m[base].step(
            tower.w1.as_slice_mut().unwrap(),
            g.w1.as_slice().unwrap(),
            lr,
            t,
            &cfg,
            true,
        );
        m[base + 1].step(
            tower.b1.as_slice_mut().unwrap(),
            g.b1.as_slice().unwrap(),
            lr,
            t,
            &cfg,
            false,
        );
        m[base + 2].step(
            tower.w2.as_slice_mut().unwrap(),
            g.w2.as_slice().unwrap(),
            lr,
            t,
            &cfg,
            true,
        );
        m[base + 3].step(
            tower.b2.as_slice_mut().unwrap(),
            g.b2.as_slice().unwrap(),
            lr,
            t,
            &cfg,
            false,
        );
    }
}

/// Per-epoch batch order and label choice, both driven by one seeded stream.
struct BatchPlan {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    chosen: Vec<usize>,
    cursor: usize,
}

impl BatchPlan {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        BatchPlan {
            rng,
            order: Vec::new(),
            chosen: Vec::new(),
            cursor: 0,
        }
    }

    fn reshuffle(&mut self, corpus: &TrainCorpus) {
        self.order = (0..corpus.len()).collect();
        self.order.shuffle(&mut self.rng);
        self.chosen = corpus
            .labels
            .iter()
            .map(|ls| *ls.choose(&mut self.rng).expect("labels nonempty"))
            .collect();
        self.cursor = 0;
    }

    fn next(&mut self, corpus: &TrainCorpus, size: usize) -> (Vec<usize>, Vec<usize>) {
        let size = size.min(corpus.len());
        if self.order.is_empty() || self.cursor + size > self.order.len() {
            self.reshuffle(corpus);
        }
        let idx = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        let labels = idx.iter().map(|&i| self.chosen[i]).collect();
        (idx, labels)
    }
}

fn gather(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

fn check_unit(m: &Array2<f64>, what: &str, step: usize) -> Result<()> {
    for (i, n) in row_norms(m.view()).iter().enumerate() {
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::invalid(format!(
                "step {step}: {what} row {i} has norm {n}"
            )));
        }
    }
    Ok(())
}

/// Runs `config.total_steps` optimizer steps from a fresh initialization.
pub fn train(
    corpus: &TrainCorpus,
    config: &TrainerConfig,
) -> Result<(TrainerState, Vec<MetricsRow>)> {
    let mut state = TrainerState::init(config, corpus.input_dim(), corpus.classes.clone())?;
    let log = train_from(&mut state, corpus, config.total_steps)?;
    Ok((state, log))
}

/// Continues training `state` up to step `until` (capped at
/// `state.config.total_steps`). Resuming from a checkpoint replays the batch
/// and class-sampling streams, so a split run equals an uninterrupted one.
pub fn train_from(
    state: &mut TrainerState,
    corpus: &TrainCorpus,
    until: usize,
) -> Result<Vec<MetricsRow>> {
    let until = until.min(state.config.total_steps);
    let config = state.config.clone();
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if corpus.classes != state.classes {
        return Err(Error::invalid(
            "corpus classes differ from the trainer's class list",
        ));
    }
    let num_classes = corpus.classes.len();
    let budget = if config.full_softmax {
        num_classes
    } else {
        config.num_sampled_classes.min(num_classes)
    };
    let (lambda, use_class, use_contrast) = match config.recipe {
        Recipe::Sup => (1.0, true, false),
        Recipe::Clip => (0.0, false, true),
        Recipe::Mofi => (config.lambda, true, true),
    };
    let mut plan = BatchPlan::new(config.seed);
    let mut class_rng = ChaCha8Rng::seed_from_u64(config.seed);
    class_rng.set_stream(2);
    let tau_range = (config.tau_min, config.tau_max);
    let mut log = Vec::with_capacity(config.total_steps.saturating_sub(state.step));

    // Replay the batch stream so resumed runs see the same batches.
    for _ in 0..state.step {
        let (_, labels) = plan.next(corpus, config.batch_size);
        if use_class && !config.full_softmax {
            sample_classes(&labels, num_classes, budget, &mut class_rng)?;
        }
    }

    while state.step < until {
        let lr = lr_schedule(
            state.step,
            config.peak_lr,
            config.warmup_steps,
            config.total_steps,
        );
        let t = state.step + 1;
        let (idx, labels) = plan.next(corpus, config.batch_size);
        let k = idx.len();
        let x_img = gather(&corpus.images, &idx);
        let img_cache = state.image.forward(x_img.view());

        let mut d_img = Array2::<f64>::zeros((k, config.embed_dim));
        let mut d_class_rows: Option<(Vec<usize>, Array2<f64>)> = None;
        let mut loss_class = None;
        if use_class {
            let sampled = if config.full_softmax {
                (0..num_classes).collect()
            } else {
                sample_classes(&labels, num_classes, budget, &mut class_rng)?
            };
            let pos: BTreeMap<usize, usize> =
                sampled.iter().enumerate().map(|(i, &c)| (c, i)).collect();
            let local: Vec<usize> = labels.iter().map(|c| pos[c]).collect();
            let w = gather(&state.class_weights, &sampled);
            let out = class_loss(
                img_cache.output.view(),
                &local,
                w.view(),
                config.margin,
                config.class_temperature,
            )?;
            d_img.scaled_add(lambda, &out.d_embeddings);
            d_class_rows = Some((sampled, out.d_weights * lambda));
            loss_class = Some(out.loss);
        }

        let mut loss_contrast = None;
        let mut text_step = None;
        let mut d_log_tau = 0.0;
        if use_contrast {
            let x_txt = gather(&corpus.texts, &idx);
            let txt_cache = state.text.forward(x_txt.view());
            let tau = state.tau();
            let out = contrast_loss(
                img_cache.output.view(),
                txt_cache.output.view(),
                tau,
                tau_range,
            )?;
            let scale = (1.0 - lambda) / k as f64;
            d_img.scaled_add(scale, &out.d_images);
            let d_txt = &out.d_texts * scale;
            d_log_tau = scale * out.d_tau * tau;
            loss_contrast = Some(out.loss / k as f64);
            text_step = Some(state.text.backward(&txt_cache, &d_txt));
        }

        let total = combined_loss(
            lambda,
            loss_class.unwrap_or(0.0),
            loss_contrast.unwrap_or(0.0),
        )?;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {}: loss_class={loss_class:?} loss_contrast={loss_contrast:?} tau={} lr={lr}",
                state.step,
                state.tau()
            )));
        }

        let img_grads = state.image.backward(&img_cache, &d_img);
        state.apply_tower_grads(0, &img_grads, lr, t);
        if let Some(g) = &text_step {
            state.apply_tower_grads(1, g, lr, t);
        }
        if let Some((rows, d_rows)) = d_class_rows {
            let mut full = Array2::<f64>::zeros(state.class_weights.raw_dim());
            for (i, &r) in rows.iter().enumerate() {
                full.row_mut(r).assign(&d_rows.row(i));
            }
            let cfg = config.optimizer;
            state.moments[8].step(
                state.class_weights.as_slice_mut().unwrap(),
                full.as_slice().unwrap(),
                lr,
                t,
                &cfg,
                true,
            );
            normalize_rows(&mut state.class_weights);
        }
        if use_contrast {
            let cfg = config.optimizer;
            let mut lt = [state.log_tau];
            state.moments[9].step(&mut lt, &[d_log_tau], lr, t, &cfg, false);
            state.log_tau = lt[0].clamp(config.tau_min.ln(), config.tau_max.ln());
        }
        if !state.image.is_finite() || !state.text.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {}: parameters diverged",
                state.step
            )));
        }
        if config.check_invariants {
            check_unit(&state.class_weights, "class weight", state.step)?;
            check_unit(
                &state.image.embed(x_img.view()),
                "image embedding",
                state.step,
            )?;
        }

        log.push(MetricsRow {
            step: state.step,
            lr,
            loss_class,
            loss_contrast,
            loss_total: total,
            tau: state.tau(),
        });
        state.step += 1;
    }
    Ok(log)
}
