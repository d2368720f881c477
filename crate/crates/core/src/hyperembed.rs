//! Poincaré-ball entity embeddings trained on a weighted link graph.
//!
//! Each undirected edge `(a, b)` contributes, in both directions, the
//! negative-sampling ranking loss
//!
//! ```text
//! L(a, b) = -log( exp(-d(a,b)) / Σ_{n ∈ {b} ∪ Neg(a)} exp(-d(a,n)) )
//! ```
//!
//! where `Neg(a)` are nodes drawn uniformly among those not linked to `a`.
//! Updates are Riemannian SGD steps: the Euclidean gradient is rescaled by the
//! inverse metric `(1 - |u|²)² / 4` and the point is projected back inside the
//! ball of radius `max_norm`.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::VectorStore;
use crate::vector::{dot, norm, norm_sq};

pub const DEFAULT_MAX_NORM: f64 = 1.0 - 1e-5;

/// Hyperbolic distance between two points of the open unit ball.
pub fn poincare_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    check_in_ball(u)?;
    check_in_ball(v)?;
    Ok(distance_unchecked(u, v))
}

fn check_in_ball(u: &[f64]) -> Result<()> {
    let n = norm_sq(u);
    if !(n < 1.0) {
        return Err(Error::invalid(format!(
            "point with norm {} is not inside the unit ball",
            n.sqrt()
        )));
    }
    Ok(())
}

fn diff_sq(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn distance_unchecked(u: &[f64], v: &[f64]) -> f64 {
    let alpha = 1.0 - norm_sq(u);
    let beta = 1.0 - norm_sq(v);
    let gamma = 1.0 + 2.0 * diff_sq(u, v) / (alpha * beta);
    acosh(gamma)
}

fn acosh(x: f64) -> f64 {
    // ln(x + sqrt(x² - 1)) written to stay accurate near x = 1.
    let t = x - 1.0;
    (t + (t * (t + 2.0)).sqrt()).ln_1p()
}

/// Distance and its Euclidean gradients with respect to both arguments.
///
/// At `u == v` the distance is not differentiable; zero gradients are
/// returned there.
pub fn poincare_distance_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_in_ball(u)?;
    check_in_ball(v)?;
    Ok(distance_grad_unchecked(u, v))
}

fn distance_grad_unchecked(u: &[f64], v: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let uu = norm_sq(u);
    let vv = norm_sq(v);
    let uv = dot(u, v);
    let alpha = 1.0 - uu;
    let beta = 1.0 - vv;
    let gamma = 1.0 + 2.0 * diff_sq(u, v) / (alpha * beta);
    let d = acosh(gamma);
    let s = (gamma * gamma - 1.0).sqrt();
    if !(s > 1e-12) {
        return (d, vec![0.0; u.len()], vec![0.0; v.len()]);
    }
    let cu = 4.0 / (beta * s);
    let cv = 4.0 / (alpha * s);
    let ku = (vv - 2.0 * uv + 1.0) / (alpha * alpha);
    let kv = (uu - 2.0 * uv + 1.0) / (beta * beta);
    let gu = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| cu * (ku * a - b / alpha))
        .collect();
    let gv = v
        .iter()
        .zip(u)
        .map(|(&b, &a)| cv * (kv * b - a / beta))
        .collect();
    (d, gu, gv)
}

/// Scales `u` back inside the ball of radius `max_norm` if it left it.
pub fn project_to_ball(u: &mut [f64], max_norm: f64) {
    let n = norm(u);
    if n > max_norm {
        let s = max_norm / n;
        u.iter_mut().for_each(|x| *x *= s);
        while norm(u) > max_norm {
            u.iter_mut().for_each(|x| *x *= 1.0 - 1e-12);
        }
    }
}

/// Undirected weighted link graph over entity ids.
#[derive(Debug, Clone, Default)]
pub struct LinkGraph {
    nodes: Vec<String>,
    index: HashMap<String, usize>,
    /// `(src, dst, multiplicity)` with `src != dst`.
    edges: Vec<(usize, usize, u32)>,
}

impl LinkGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(id.to_string());
        self.index.insert(id.to_string(), i);
        i
    }

    pub fn add_edge(&mut self, a: &str, b: &str, weight: u32) -> Result<()> {
        if a == b {
            return Err(Error::invalid(format!("self-loop on {a:?}")));
        }
        if weight == 0 {
            return Err(Error::invalid(format!("edge {a:?}-{b:?} has zero weight")));
        }
        let i = self.add_node(a);
        let j = self.add_node(b);
        self.edges.push((i, j, weight));
        Ok(())
    }

    /// Parses `src \t dst \t weight` lines; `#` comments and blank lines are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        const WHAT: &str = "graph";
        let mut g = LinkGraph::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::parse(
                    WHAT,
                    lineno,
                    format!("expected 3 tab-separated columns, found {}", cols.len()),
                ));
            }
            let (a, b) = (cols[0].trim(), cols[1].trim());
            if a.is_empty() || b.is_empty() {
                return Err(Error::parse(WHAT, lineno, "empty node id"));
            }
            let w: u32 = cols[2]
                .trim()
                .parse()
                .map_err(|_| Error::parse(WHAT, lineno, format!("bad weight {:?}", cols[2])))?;
            g.add_edge(a, b, w)
                .map_err(|e| Error::parse(WHAT, lineno, e.to_string()))?;
        }
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for &(a, b, w) in &self.edges {
            out.push_str(&format!("{}\t{}\t{}\n", self.nodes[a], self.nodes[b], w));
        }
        out
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.edges
            .iter()
            .map(|&(a, b, w)| (self.nodes[a].as_str(), self.nodes[b].as_str(), w))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PoincareConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub negatives: usize,
    pub seed: u64,
    /// Fraction of epochs run at the reduced burn-in rate.
    pub burn_in_fraction: f64,
    pub burn_in_lr_factor: f64,
    pub max_norm: f64,
    pub init_radius: f64,
    /// `1` trains online and sequentially; larger values shard each epoch.
    pub shards: usize,
    /// Checks the ball constraint after every update and fails on violation.
    pub verify_each_step: bool,
}

impl Default for PoincareConfig {
    fn default() -> Self {
        PoincareConfig {
            dim: 16,
            epochs: 100,
            learning_rate: 0.3,
            negatives: 10,
            seed: 0,
            burn_in_fraction: 0.1,
            burn_in_lr_factor: 0.1,
            max_norm: DEFAULT_MAX_NORM,
            init_radius: 1e-3,
            shards: 1,
            verify_each_step: cfg!(debug_assertions),
        }
    }
}

/// Trained embedding: one point per entity, strictly inside the unit ball.
#[derive(Debug, Clone, PartialEq)]
pub struct PoincareEmbedding {
    dim: usize,
    ids: Vec<String>,
    points: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    max_norm: f64,
}

impl PoincareEmbedding {
    pub fn new(dim: usize, max_norm: f64) -> Self {
        PoincareEmbedding {
            dim,
            ids: Vec::new(),
            points: Vec::new(),
            index: HashMap::new(),
            max_norm,
        }
    }

    /// Adds a point, projecting it into the ball of radius `max_norm`.
    pub fn insert(&mut self, id: &str, mut point: Vec<f64>) -> Result<()> {
        if point.len() != self.dim {
            return Err(Error::invalid(format!(
                "point for {id:?} has dim {}, expected {}",
                point.len(),
                self.dim
            )));
        }
        if point.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("point for {id:?}")));
        }
        if self.index.contains_key(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        project_to_ball(&mut point, self.max_norm);
        self.index.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.points.push(point);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_norm(&self) -> f64 {
        self.max_norm
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

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.points[i].as_slice())
    }

    pub fn distance(&self, a: &str, b: &str) -> Option<f64> {
        Some(distance_unchecked(self.get(a)?, self.get(b)?))
    }

    pub fn max_point_norm(&self) -> f64 {
        self.points.iter().map(|p| norm(p)).fold(0.0, f64::max)
    }

    pub fn to_store(&self) -> VectorStore {
        let mut s = VectorStore::new(self.dim);
        for (id, p) in self.ids.iter().zip(&self.points) {
            s.insert_f64(id.clone(), p)
                .expect("ids unique and dims match");
        }
        s
    }

    /// Builds an embedding from a store, rejecting points on or outside the
    /// unit ball.
    pub fn from_store(store: &VectorStore) -> Result<Self> {
        let mut emb = PoincareEmbedding::new(store.dim(), DEFAULT_MAX_NORM);
        for (id, v) in store.iter() {
            let p: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            check_in_ball(&p).map_err(|e| Error::invalid(format!("{id:?}: {e}")))?;
            emb.index.insert(id.to_string(), emb.ids.len());
            emb.ids.push(id.to_string());
            emb.points.push(p);
        }
        Ok(emb)
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_store().save(path)
    }

    pub fn import(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&VectorStore::load(path)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Summed online loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Largest point norm observed after any update.
    pub max_norm_seen: f64,
    pub updates: usize,
}

struct Sampler {
    neighbors: Vec<HashSet<usize>>,
    n: usize,
}

impl Sampler {
    fn new(n: usize, pairs: &[(usize, usize)]) -> Self {
        let mut neighbors = vec![HashSet::new(); n];
        for &(a, b) in pairs {
            neighbors[a].insert(b);
            neighbors[b].insert(a);
        }
        Sampler { neighbors, n }
    }

    fn draw(&self, a: usize, k: usize, rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
        out.clear();
        if self.n <= 1 + self.neighbors[a].len() {
            return;
        }
        while out.len() < k {
            let c = rng.random_range(0..self.n);
            if c != a && !self.neighbors[a].contains(&c) {
                out.push(c);
            }
        }
    }
}

/// Loss of one directed training pair and the accumulated Euclidean
/// gradients per touched node.
fn pair_loss_grad(
    points: &[Vec<f64>],
    a: usize,
    b: usize,
    negs: &[usize],
    grads: &mut Vec<(usize, Vec<f64>)>,
) -> f64 {
    grads.clear();
    let cands: Vec<usize> = std::iter::once(b).chain(negs.iter().copied()).collect();
    let parts: Vec<(f64, Vec<f64>, Vec<f64>)> = cands
        .iter()
        .map(|&c| distance_grad_unchecked(&points[a], &points[c]))
        .collect();
    let min_d = parts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let z: f64 = parts.iter().map(|p| (-(p.0 - min_d)).exp()).sum();
    let loss = parts[0].0 - min_d + z.ln();
    let mut ga = vec![0.0; points[a].len()];
    for (i, (&c, (d, gu, gv))) in cands.iter().zip(&parts).enumerate() {
        let soft = (-(d - min_d)).exp() / z;
        let w = if i == 0 { 1.0 } else { 0.0 } - soft;
        if w == 0.0 {
            continue;
        }
        ga.iter_mut().zip(gu).for_each(|(g, x)| *g += w * x);
        grads.push((c, gv.iter().map(|x| w * x).collect()));
    }
    grads.push((a, ga));
    loss
}

fn riemannian_step(p: &mut [f64], grad: &[f64], lr: f64, max_norm: f64) {
    let scale = (1.0 - norm_sq(p)).powi(2) / 4.0;
    p.iter_mut()
        .zip(grad)
        .for_each(|(x, g)| *x -= lr * scale * g);
    project_to_ball(p, max_norm);
}

fn check_finite_loss(loss: f64, a: usize, b: usize, graph: &LinkGraph, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "loss {loss} on edge {:?}-{:?} in epoch {epoch}",
            graph.nodes[a], graph.nodes[b]
        )))
    }
}

/// One shard's summed loss and per-node gradient sums.
type ShardDelta = (f64, Vec<(usize, Vec<f64>)>);

/// Trains Poincaré embeddings for every node of `graph`.
pub fn train_embeddings(
    graph: &LinkGraph,
    config: &PoincareConfig,
) -> Result<(PoincareEmbedding, TrainReport)> {
    if graph.nodes.is_empty() || graph.edges.is_empty() {
        return Err(Error::invalid("graph has no edges"));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    if config.dim == 0 {
        return Err(Error::invalid("dim must be positive"));
    }
    if !(config.max_norm > 0.0 && config.max_norm < 1.0) {
        return Err(Error::invalid("max_norm must lie in (0, 1)"));
    }
    let n = graph.nodes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let r = config.init_radius;
    let mut points: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..config.dim).map(|_| rng.random_range(-r..r)).collect())
        .collect();
    for p in &mut points {
        project_to_ball(p, config.max_norm);
    }

    let simple: Vec<(usize, usize)> = graph.edges.iter().map(|&(a, b, _)| (a, b)).collect();
    let sampler = Sampler::new(n, &simple);
    let mut directed: Vec<(usize, usize)> = Vec::new();
    for &(a, b, w) in &graph.edges {
        for _ in 0..w {
            directed.push((a, b));
            directed.push((b, a));
        }
    }

    let burn_in = (config.epochs as f64 * config.burn_in_fraction).ceil() as usize;
    let mut report = TrainReport::default();
    let mut negs = Vec::with_capacity(config.negatives);
    let mut grads = Vec::new();

    for epoch in 0..config.epochs {
        let lr = if epoch < burn_in {
            config.learning_rate * config.burn_in_lr_factor
        } else {
            config.learning_rate
        };
        directed.shuffle(&mut rng);
        let mut epoch_loss = 0.0;

        if config.shards <= 1 {
            for &(a, b) in &directed {
                sampler.draw(a, config.negatives, &mut rng, &mut negs);
                let loss = pair_loss_grad(&points, a, b, &negs, &mut grads);
                check_finite_loss(loss, a, b, graph, epoch)?;
                epoch_loss += loss;
                for (node, g) in grads.drain(..) {
                    riemannian_step(&mut points[node], &g, lr, config.max_norm);
                    if config.verify_each_step {
                        verify_norm(&points[node], config.max_norm, &graph.nodes[node])?;
                    }
                    report.max_norm_seen = report.max_norm_seen.max(norm(&points[node]));
                }
                report.updates += 1;
            }
        } else {
            // Negatives are drawn up front so the result depends only on the
            // seed and shard count, not on thread scheduling.
            let samples: Vec<Vec<usize>> = directed
                .iter()
                .map(|&(a, _)| {
                    let mut v = Vec::new();
                    sampler.draw(a, config.negatives, &mut rng, &mut v);
                    v
                })
                .collect();
            let chunk = directed.len().div_ceil(config.shards);
            let snapshot = &points;
            let shard_results: Vec<Result<ShardDelta>> = directed
                .par_chunks(chunk)
                .zip(samples.par_chunks(chunk))
                .map(|(pairs, negs)| {
                    let mut acc: HashMap<usize, Vec<f64>> = HashMap::new();
                    let mut grads = Vec::new();
                    let mut loss_sum = 0.0;
                    for (&(a, b), neg) in pairs.iter().zip(negs) {
                        let loss = pair_loss_grad(snapshot, a, b, neg, &mut grads);
                        check_finite_loss(loss, a, b, graph, epoch)?;
                        loss_sum += loss;
                        for (node, g) in grads.drain(..) {
                            let e = acc.entry(node).or_insert_with(|| vec![0.0; g.len()]);
                            e.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                        }
                    }
                    let mut acc: Vec<(usize, Vec<f64>)> = acc.into_iter().collect();
                    acc.sort_by_key(|e| e.0);
                    Ok((loss_sum, acc))
                })
                .collect();
            for res in shard_results {
                let (loss, deltas) = res?;
                epoch_loss += loss;
                for (node, g) in deltas {
                    riemannian_step(&mut points[node], &g, lr, config.max_norm);
                    if config.verify_each_step {
                        verify_norm(&points[node], config.max_norm, &graph.nodes[node])?;
                    }
                    report.max_norm_seen = report.max_norm_seen.max(norm(&points[node]));
                }
                report.updates += 1;
            }
        }
        report.epoch_losses.push(epoch_loss);
    }

    let mut emb = PoincareEmbedding::new(config.dim, config.max_norm);
    for (id, p) in graph.nodes.iter().zip(points) {
        emb.insert(id, p)?;
    }
    Ok((emb, report))
}

fn verify_norm(p: &[f64], max_norm: f64, id: &str) -> Result<()> {
    let n = norm(p);
    if n > max_norm {
        return Err(Error::invalid(format!(
            "ball constraint violated for {id:?}: norm {n} > {max_norm}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn ball_point(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        loop {
            let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.9..0.9)).collect();
            if norm(&p) < 0.95 {
                return p;
            }
        }
    }

    #[test]
    fn distance_from_origin_matches_closed_form() {
        let v = [0.3, 0.4];
        let d = poincare_distance(&[0.0, 0.0], &v).unwrap();
        // d(0, v) = 2 artanh(|v|), |v| = 0.5
        let expected = 2.0 * 0.5f64.atanh();
        assert!((d - expected).abs() < 1e-12);
        assert!((d - 1.098612).abs() < 1e-6);
    }

    #[test]
    fn distance_identity_and_domain() {
        let u = [0.1, -0.2, 0.3];
        assert_eq!(poincare_distance(&u, &u).unwrap(), 0.0);
        assert!(poincare_distance(&[1.0, 0.0], &[0.0, 0.0]).is_err());
        assert!(poincare_distance(&[0.0, 0.0], &[0.8, 0.8]).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let u = ball_point(4, &mut rng);
            let v = ball_point(4, &mut rng);
            let (_, gu, gv) = poincare_distance_grad(&u, &v).unwrap();
            let h = 1e-6;
            for i in 0..4 {
                let mut up = u.clone();
                let mut um = u.clone();
                up[i] += h;
                um[i] -= h;
                let fd = (distance_unchecked(&up, &v) - distance_unchecked(&um, &v)) / (2.0 * h);
                assert!(
                    (fd - gu[i]).abs() <= 1e-4 * fd.abs().max(1e-3),
                    "{fd} vs {}",
                    gu[i]
                );
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[i] += h;
                vm[i] -= h;
                let fd = (distance_unchecked(&u, &vp) - distance_unchecked(&u, &vm)) / (2.0 * h);
                assert!((fd - gv[i]).abs() <= 1e-4 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn projection_respects_max_norm() {
        let mut p = vec![3.0, 4.0];
        project_to_ball(&mut p, DEFAULT_MAX_NORM);
        assert!(norm(&p) <= DEFAULT_MAX_NORM);
    }

    fn path_graph() -> LinkGraph {
        LinkGraph::parse("a\tb\t1\nb\tc\t1\n").unwrap()
    }

    #[test]
    fn path_graph_orders_distances() {
        let cfg = PoincareConfig {
            dim: 2,
            epochs: 200,
            seed: 3,
            verify_each_step: true,
            ..Default::default()
        };
        let (emb, report) = train_embeddings(&path_graph(), &cfg).unwrap();
        let ab = emb.distance("a", "b").unwrap();
        let bc = emb.distance("b", "c").unwrap();
        let ac = emb.distance("a", "c").unwrap();
        assert!(ab < ac && bc < ac, "ab={ab} bc={bc} ac={ac}");
        assert!(report.max_norm_seen <= cfg.max_norm);
        assert!(emb.max_point_norm() <= cfg.max_norm);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = PoincareConfig {
            dim: 3,
            epochs: 20,
            seed: 9,
            ..Default::default()
        };
        let (a, _) = train_embeddings(&path_graph(), &cfg).unwrap();
        let (b, _) = train_embeddings(&path_graph(), &cfg).unwrap();
        assert_eq!(a, b);
        let cfg = PoincareConfig { shards: 3, ..cfg };
        let (c, _) = train_embeddings(&path_graph(), &cfg).unwrap();
        let (d, _) = train_embeddings(&path_graph(), &cfg).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn rejects_bad_config_and_graphs() {
        let cfg = PoincareConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(train_embeddings(&path_graph(), &cfg).is_err());
        assert!(train_embeddings(&LinkGraph::new(), &PoincareConfig::default()).is_err());
        assert!(LinkGraph::parse("a\ta\t1\n")
            .unwrap_err()
            .to_string()
            .contains("line 1"));
        assert!(LinkGraph::parse("a\tb\t0\n").is_err());
        assert!(LinkGraph::parse("a\tb\n").is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let (emb, _) = train_embeddings(
            &path_graph(),
            &PoincareConfig {
                dim: 8,
                epochs: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        emb.export(&path).unwrap();
        let back = PoincareEmbedding::import(&path).unwrap();
        assert_eq!(back.ids(), emb.ids());
        for id in emb.ids() {
            let a: Vec<f32> = emb.get(id).unwrap().iter().map(|&x| x as f32).collect();
            let b: Vec<f32> = back.get(id).unwrap().iter().map(|&x| x as f32).collect();
            assert_eq!(a, b);
        }
        back.export(&path).unwrap();
        assert_eq!(PoincareEmbedding::import(&path).unwrap(), back);

        let empty = PoincareEmbedding::new(4, DEFAULT_MAX_NORM);
        empty.export(&path).unwrap();
        assert!(PoincareEmbedding::import(&path).unwrap().is_empty());
    }

    #[test]
    fn import_rejects_points_outside_ball() {
        let mut s = VectorStore::new(2);
        s.insert("x", &[1.0, 0.0]).unwrap();
        assert!(PoincareEmbedding::from_store(&s).is_err());
    }

    proptest! {
        #[test]
        fn distance_is_symmetric_and_nonnegative(
            u in proptest::collection::vec(-0.57f64..0.57, 3),
            v in proptest::collection::vec(-0.57f64..0.57, 3),
        ) {
            let a = poincare_distance(&u, &v).unwrap();
            let b = poincare_distance(&v, &u).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}
