//! Exact t-SNE atlases of (observation, message) pairs, projection of new
//! observations and nearest-neighbour message recommendation.

use std::collections::BTreeMap;

use bcomm_grad::rng::{stream, stream_id, Rng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::trainer::streams;
use crate::{CoreError, Protocol};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtlasConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub k: usize,
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 500,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            exaggeration: 4.0,
            exaggeration_iters: 100,
            k: 5,
            max_entries: 5000,
            seed: 0,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Shannon entropy in bits.
fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.log2())
        .sum::<f64>()
}

/// Row `i` of the conditional affinity matrix at precision `beta`.
fn conditional_row(d2: &[f64], i: usize, beta: f64, out: &mut [f64]) {
    let min = d2
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        *o = if j == i { 0.0 } else { (-(d2[j] - min) * beta).exp() };
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Conditional distributions `p_{j|i}` (row-major `N × N`) with the entropy
/// of each row matched to `log2(perplexity)`.
pub fn conditional_affinities(
    points: &[Vec<f64>],
    perplexity: f64,
) -> Result<Vec<f64>, CoreError> {
    let n = points.len();
    if perplexity.is_nan() || perplexity < 1.0 || (n as f64) < 3.0 * perplexity {
        return Err(CoreError::invalid(format!(
            "perplexity {perplexity} needs at least {} points, got {n}",
            (3.0 * perplexity).ceil()
        )));
    }
    let target = perplexity.log2();
    let mut p = vec![0.0; n * n];
    let mut d2 = vec![0.0; n];
    for i in 0..n {
        for (j, d) in d2.iter_mut().enumerate() {
            *d = sq_dist(&points[i], &points[j]);
        }
        let row = &mut p[i * n..(i + 1) * n];
        let spread = d2
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .any(|(_, &d)| d > 0.0);
        if !spread {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j == i { 0.0 } else { 1.0 / (n - 1) as f64 };
            }
            continue;
        }
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        for _ in 0..200 {
            conditional_row(&d2, i, beta, row);
            let h = entropy_bits(row);
            if (h - target).abs() < 1e-5 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    Ok(p)
}

/// Symmetrized joint affinities `P = (P_cond + P_condᵀ) / 2N`.
pub fn compute_affinities(points: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>, CoreError> {
    let n = points.len();
    let c = conditional_affinities(points, perplexity)?;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (c[i * n + j] + c[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(p)
}

/// Student-t joint similarities of a 2-D layout, plus the unnormalized kernel.
fn student_q(y: &[[f64; 2]]) -> (Vec<f64>, Vec<f64>) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                num[i * n + j] = 1.0 / (1.0 + d);
                z += num[i * n + j];
            }
        }
    }
    let q = num.iter().map(|v| v / z).collect();
    (q, num)
}

/// `KL(P ‖ Q)` for the layout `y`.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let (q, _) = student_q(y);
    p.iter()
        .zip(&q)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p / q.max(1e-300)).ln())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    pub initial_kl: f64,
    pub final_kl: f64,
}

/// t-SNE from a small random Gaussian layout drawn from `rng`.
pub fn tsne_embed(p: &[f64], config: &AtlasConfig, rng: &mut Rng) -> Result<TsneResult, CoreError> {
    let n = (p.len() as f64).sqrt() as usize;
    if n * n != p.len() || n < 2 {
        return Err(CoreError::invalid("affinity matrix must be square with N >= 2"));
    }
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let init: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(rng), normal.sample(rng)])
        .collect();
    tsne_embed_from(p, init, config)
}

/// Momentum gradient descent on `KL(P ‖ Q)` starting from `init`, with
/// per-coordinate adaptive gains.
pub fn tsne_embed_from(
    p: &[f64],
    init: Vec<[f64; 2]>,
    config: &AtlasConfig,
) -> Result<TsneResult, CoreError> {
    let n = init.len();
    if p.len() != n * n {
        return Err(CoreError::invalid(format!(
            "affinity matrix has {} entries for {n} points",
            p.len()
        )));
    }
    let mut y = init;
    let initial_kl = kl_divergence(p, &y);
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    for it in 0..config.iterations {
        let exag = if it < config.exaggeration_iters {
            config.exaggeration
        } else {
            1.0
        };
        let momentum = if it < config.momentum_switch {
            config.initial_momentum
        } else {
            config.final_momentum
        };
        let (q, num) = student_q(&y);
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                let k = i * n + j;
                let m = (exag * p[k] - q[k]) * num[k];
                grad[0] += 4.0 * m * (y[i][0] - y[j][0]);
                grad[1] += 4.0 * m * (y[i][1] - y[j][1]);
            }
            if !(grad[0].is_finite() && grad[1].is_finite()) {
                return Err(CoreError::Diverged {
                    reason: format!("non-finite t-SNE gradient at iteration {it}, point {i}"),
                    dump: format!("y = {:?}, gains = {:?}", y[i], gains[i]),
                });
            }
            for d in 0..2 {
                gains[i][d] = if (grad[d] > 0.0) != (update[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(0.01)
                };
                update[i][d] =
                    momentum * update[i][d] - config.learning_rate * gains[i][d] * grad[d];
            }
        }
        for i in 0..n {
            y[i][0] += update[i][0];
            y[i][1] += update[i][1];
        }
        let (mx, my) = y
            .iter()
            .fold((0.0, 0.0), |(a, b), v| (a + v[0] / n as f64, b + v[1] / n as f64));
        for v in y.iter_mut() {
            v[0] -= mx;
            v[1] -= my;
        }
    }
    let final_kl = kl_divergence(p, &y);
    Ok(TsneResult {
        coords: y,
        initial_kl,
        final_kl,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasEntry {
    pub observation: Vec<f64>,
    /// Vocabulary index of the message sent with this observation.
    pub label: u64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingAtlas {
    pub checkpoint_id: String,
    pub protocol: Protocol,
    pub config: AtlasConfig,
    pub initial_kl: f64,
    pub final_kl: f64,
    pub entries: Vec<AtlasEntry>,
}

impl EmbeddingAtlas {
    /// Embed `(observation, message)` pairs of a discrete protocol. Corpora
    /// beyond `config.max_entries` are subsampled without replacement.
    pub fn build(
        pairs: &[(Vec<f64>, Vec<f64>)],
        protocol: Protocol,
        config: &AtlasConfig,
        checkpoint_id: impl Into<String>,
    ) -> Result<Self, CoreError> {
        if !protocol.is_discrete() {
            return Err(CoreError::invalid(format!(
                "atlas labels need a discrete protocol, got {protocol}"
            )));
        }
        let mut rng = stream(config.seed, stream_id(streams::ATLAS, 0, 0));
        let chosen: Vec<usize> = if pairs.len() > config.max_entries {
            let mut idx =
                rand::seq::index::sample(&mut rng, pairs.len(), config.max_entries).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..pairs.len()).collect()
        };
        let width = pairs.first().map_or(0, |p| p.0.len());
        if chosen.iter().any(|&i| pairs[i].0.len() != width) {
            return Err(CoreError::invalid("atlas observations differ in width"));
        }
        let labels = chosen
            .iter()
            .map(|&i| protocol.decode(&pairs[i].1))
            .collect::<Result<Vec<_>, _>>()?;
        let points: Vec<Vec<f64>> = chosen.iter().map(|&i| pairs[i].0.clone()).collect();
        let p = compute_affinities(&points, config.perplexity)?;
        let tsne = tsne_embed(&p, config, &mut rng)?;
        let entries = points
            .into_iter()
            .zip(labels)
            .zip(&tsne.coords)
            .map(|((observation, label), c)| AtlasEntry {
                observation,
                label,
                x: c[0],
                y: c[1],
            })
            .collect();
        Ok(Self {
            checkpoint_id: checkpoint_id.into(),
            protocol,
            config: *config,
            initial_kl: tsne.initial_kl,
            final_kl: tsne.final_kl,
            entries,
        })
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let width = self.entries.first().map_or(0, |e| e.observation.len());
        for (i, e) in self.entries.iter().enumerate() {
            if e.observation.len() != width {
                return Err(CoreError::Corrupt(format!("atlas entry {i} has a different width")));
            }
            if !(e.x.is_finite() && e.y.is_finite()) {
                return Err(CoreError::Corrupt(format!("atlas entry {i} has non-finite coordinates")));
            }
            if self.protocol.vocab_size().is_some_and(|v| e.label >= v) {
                return Err(CoreError::Corrupt(format!("atlas entry {i} label out of range")));
            }
        }
        Ok(())
    }

    /// The `k` entries closest to `observation` (ascending distance, ties by
    /// index), optionally skipping one index.
    fn nearest(
        &self,
        observation: &[f64],
        k: usize,
        skip: Option<usize>,
    ) -> Result<Vec<(usize, f64)>, CoreError> {
        if self.entries.is_empty() {
            return Err(CoreError::State("atlas is empty".into()));
        }
        if k == 0 {
            return Err(CoreError::invalid("k must be positive"));
        }
        let mut d: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(i, e)| (i, sq_dist(&e.observation, observation).sqrt()))
            .collect();
        d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        d.truncate(k);
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
    pub label: u64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    pub neighbors: Vec<Neighbor>,
}

/// Place `observation` at the inverse-distance-weighted mean of its `k`
/// nearest atlas entries; exact matches take all the weight.
pub fn project_observation(
    atlas: &EmbeddingAtlas,
    observation: &[f64],
    k: usize,
) -> Result<Projection, CoreError> {
    let near = atlas.nearest(observation, k, None)?;
    let exact = near.iter().any(|&(_, d)| d == 0.0);
    let weight = |d: f64| -> f64 {
        match (exact, d == 0.0) {
            (true, true) => 1.0,
            (true, false) => 0.0,
            _ => 1.0 / d,
        }
    };
    let total: f64 = near.iter().map(|&(_, d)| weight(d)).sum();
    let (mut x, mut y) = (0.0, 0.0);
    for &(i, d) in &near {
        let w = weight(d) / total;
        x += w * atlas.entries[i].x;
        y += w * atlas.entries[i].y;
    }
    let neighbors = near
        .into_iter()
        .map(|(i, d)| {
            let e = &atlas.entries[i];
            Neighbor {
                index: i,
                distance: d,
                label: e.label,
                x: e.x,
                y: e.y,
            }
        })
        .collect();
    Ok(Projection { x, y, neighbors })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub label: u64,
    pub message: Vec<f64>,
    /// Votes per label among the neighbours.
    pub histogram: BTreeMap<u64, usize>,
}

/// Modal label of `near` (sorted by distance); ties go to the label of the
/// nearest neighbour holding a tied count.
fn vote(labels: impl Iterator<Item = u64> + Clone) -> (u64, BTreeMap<u64, usize>) {
    let mut hist = BTreeMap::new();
    for l in labels.clone() {
        *hist.entry(l).or_insert(0) += 1;
    }
    let top = hist.values().copied().max().unwrap_or(0);
    let label = labels
        .clone()
        .find(|l| hist[l] == top)
        .expect("non-empty neighbour set");
    (label, hist)
}

/// Most common message among the `k` nearest atlas entries.
pub fn recommend_message(
    atlas: &EmbeddingAtlas,
    observation: &[f64],
    k: usize,
) -> Result<Recommendation, CoreError> {
    let near = atlas.nearest(observation, k, None)?;
    let (label, histogram) = vote(near.iter().map(|&(i, _)| atlas.entries[i].label));
    Ok(Recommendation {
        label,
        message: atlas.protocol.encode(label)?,
        histogram,
    })
}

/// Fraction of entries whose label equals the vote of their `k` nearest
/// other entries in observation space.
pub fn neighbor_label_agreement(atlas: &EmbeddingAtlas, k: usize) -> Result<f64, CoreError> {
    if atlas.entries.len() < 2 {
        return Err(CoreError::State("atlas needs at least two entries".into()));
    }
    let mut hits = 0usize;
    for (i, e) in atlas.entries.iter().enumerate() {
        let near = atlas.nearest(&e.observation, k, Some(i))?;
        let (label, _) = vote(near.iter().map(|&(j, _)| atlas.entries[j].label));
        hits += (label == e.label) as usize;
    }
    Ok(hits as f64 / atlas.entries.len() as f64)
}

/// Message selector that follows the atlas recommendation for the listed agents.
pub struct AtlasSelector<'a> {
    pub atlas: &'a EmbeddingAtlas,
    pub agents: Vec<usize>,
    pub k: usize,
}

impl crate::trainer::MessageSelector for AtlasSelector<'_> {
    fn select(
        &mut self,
        _episode: usize,
        agent: usize,
        observation: &[f64],
    ) -> Result<Option<Vec<f64>>, CoreError> {
        if !self.agents.contains(&agent) {
            return Ok(None);
        }
        recommend_message(self.atlas, observation, self.k).map(|r| Some(r.message))
    }
}
