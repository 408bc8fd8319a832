//! Keyframe selection by local outlier factor over cosine distances, with
//! uniform and k-means sampling baselines. Frame indices are 0-based.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LofConfig {
    /// Neighbourhood size, clamped to `L - 1`.
    pub k_neighbors: usize,
    /// Frames scoring strictly above this are keyframes.
    pub threshold: f64,
    pub epsilon_norm: f64,
    pub min_keep: usize,
    pub max_keep_ratio: f64,
}

impl Default for LofConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 10,
            threshold: 1.0,
            epsilon_norm: 1e-12,
            min_keep: 2,
            max_keep_ratio: 1.0,
        }
    }
}

impl LofConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k_neighbors == 0 {
            return Err("k_neighbors must be at least 1".into());
        }
        if !(self.threshold > 0.0) {
            return Err("threshold must be positive".into());
        }
        if !(self.epsilon_norm > 0.0) {
            return Err("epsilon_norm must be positive".into());
        }
        if !(self.max_keep_ratio > 0.0 && self.max_keep_ratio <= 1.0) {
            return Err("max_keep_ratio must lie in (0, 1]".into());
        }
        Ok(())
    }
}

/// Selected frames in ascending order with their LOF scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeSet {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

/// `ceil(ratio * len)` within `[1, len]`. The product is nudged down by a
/// tiny tolerance so that e.g. `0.1 * 30` counts as exactly 3.
pub fn budget(ratio: f64, len: usize) -> usize {
    if len == 0 {
        return 0;
    }
    ((ratio * len as f64 - 1e-9).ceil().max(1.0) as usize).min(len)
}

fn norm_sq(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum()
}

fn cosine_with_norms(u: &[f64], v: &[f64], uu: f64, vv: f64, eps: f64) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let floor = eps * eps;
    (1.0 - dot / (uu.max(floor) * vv.max(floor)).sqrt()).clamp(0.0, 2.0)
}

/// `1 - u.v / (|u||v|)` in `[0, 2]`; squared norms below `eps^2` are raised
/// to `eps^2`, so a zero vector sits at distance 1 from everything.
pub fn cosine_distance(u: &[f64], v: &[f64], eps: f64) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine_distance: dimension mismatch");
    cosine_with_norms(u, v, norm_sq(u), norm_sq(v), eps)
}

fn distance_matrix(seq: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = seq.iter().map(|v| norm_sq(v)).collect();
    let n = seq.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let x = cosine_with_norms(&seq[i], &seq[j], norms[i], norms[j], eps);
            d[i][j] = x;
            d[j][i] = x;
        }
    }
    d
}

/// k-distance and the `<=`-neighbourhood of row `i` of a distance matrix.
fn neighborhood(row: &[f64], i: usize, k: usize) -> (f64, Vec<usize>) {
    let mut others: Vec<f64> = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d).collect();
    let (_, kth, _) = others.select_nth_unstable_by(k - 1, f64::total_cmp);
    let d_k = *kth;
    let members = (0..row.len()).filter(|&j| j != i && row[j] <= d_k).collect();
    (d_k, members)
}

/// Distance from frame `i` to its k-th nearest other frame, and every other
/// frame within that distance (more than `k` under ties).
pub fn k_distance_neighborhood(seq: &[Vec<f64>], i: usize, k: usize, eps: f64) -> (f64, Vec<usize>) {
    assert!(seq.len() >= 2 && (1..seq.len()).contains(&k), "need L >= 2 and 1 <= k <= L - 1");
    let row: Vec<f64> = seq.iter().map(|v| cosine_distance(&seq[i], v, eps)).collect();
    neighborhood(&row, i, k)
}

/// LOF of every frame. `k` is clamped to `L - 1`; needs `L >= 2`.
pub fn lof_scores(seq: &[Vec<f64>], cfg: &LofConfig) -> Vec<f64> {
    let n = seq.len();
    assert!(n >= 2, "lof_scores needs at least two frames");
    let k = cfg.k_neighbors.clamp(1, n - 1);
    let dist = distance_matrix(seq, cfg.epsilon_norm);
    let hoods: Vec<(f64, Vec<usize>)> = (0..n).map(|i| neighborhood(&dist[i], i, k)).collect();
    let lrd: Vec<f64> = (0..n)
        .map(|i| {
            let members = &hoods[i].1;
            let reach: f64 = members.iter().map(|&j| hoods[j].0.max(dist[i][j])).sum();
            let mean = reach / members.len() as f64;
            1.0 / if mean > 0.0 { mean } else { cfg.epsilon_norm }
        })
        .collect();
    (0..n)
        .map(|i| {
            let members = &hoods[i].1;
            members.iter().map(|&j| lrd[j] / lrd[i]).sum::<f64>() / members.len() as f64
        })
        .collect()
}

/// Other frames ordered by descending score, earlier frames first on ties.
fn ranked_except(scores: &[f64], skip: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| i != skip).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Frames scoring above the threshold, always including the final frame.
/// Falls back to the top `min_keep` when too few qualify and keeps only the
/// top `ceil(max_keep_ratio * L)` (never below `min_keep`) when too many do.
pub fn select_keyframes(seq: &[Vec<f64>], cfg: &LofConfig) -> KeyframeSet {
    let n = seq.len();
    if n == 0 {
        return KeyframeSet {
            indices: vec![],
            scores: vec![],
        };
    }
    if n == 1 {
        return KeyframeSet {
            indices: vec![0],
            scores: vec![1.0],
        };
    }
    let scores = lof_scores(seq, cfg);
    let last = n - 1;
    let mut chosen: Vec<usize> = (0..last).filter(|&i| scores[i] > cfg.threshold).collect();
    let floor = cfg.min_keep.min(n);
    let cap = budget(cfg.max_keep_ratio, n).max(floor);
    if chosen.len() + 1 < floor {
        chosen = ranked_except(&scores, last).into_iter().take(floor - 1).collect();
    } else if chosen.len() + 1 > cap {
        chosen.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        chosen.truncate(cap - 1);
    }
    chosen.push(last);
    chosen.sort_unstable();
    KeyframeSet {
        scores: chosen.iter().map(|&i| scores[i]).collect(),
        indices: chosen,
    }
}

/// `ceil(ratio * len)` evenly spaced frames including the first and last.
/// A budget of one frame keeps only the last.
pub fn uniform_sample(len: usize, ratio: f64) -> Vec<usize> {
    let m = budget(ratio, len);
    match m {
        0 => vec![],
        1 => vec![len - 1],
        _ => (0..m).map(|i| (2 * i * (len - 1) + (m - 1)) / (2 * (m - 1))).collect(),
    }
}

fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_euclidean(point, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

pub const KMEANS_MAX_ITERS: usize = 50;

/// k-means over unit-normalised embeddings with `k = ceil(ratio * L)`,
/// seeded k-means++ initialisation, and at most 50 Lloyd iterations. Returns
/// the frame nearest each centroid; a centroid whose nearest frame is taken
/// falls back to its next-nearest free frame.
pub fn cluster_sample(seq: &[Vec<f64>], ratio: f64, master_seed: u64, stream_index: u64, eps: f64) -> Vec<usize> {
    let n = seq.len();
    let k = budget(ratio, n);
    if k == 0 {
        return vec![];
    }
    let points: Vec<Vec<f64>> = seq
        .iter()
        .map(|v| {
            let norm = norm_sq(v).max(eps * eps).sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut rng = substream(master_seed, "kmeans", stream_index);

    let mut picked = vec![rng.random_range(0..n)];
    while picked.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| picked.iter().map(|&c| squared_euclidean(p, &points[c])).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 && target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            // Rounding can leave the target past the end; take the last
            // frame with positive weight.
            if weights[idx] == 0.0 {
                idx = weights.iter().rposition(|&w| w > 0.0).unwrap_or(idx);
            }
            idx
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !picked.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        picked.push(next);
    }
    let mut centroids: Vec<Vec<f64>> = picked.iter().map(|&i| points[i].clone()).collect();

    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }

    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(k);
    for centroid in &centroids {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            squared_euclidean(&points[a], centroid)
                .total_cmp(&squared_euclidean(&points[b], centroid))
                .then(a.cmp(&b))
        });
        if let Some(&i) = order.iter().find(|&&i| !taken[i]) {
            taken[i] = true;
            out.push(i);
        }
    }
    out.sort_unstable();
    out
}

/// How a trajectory's stored frames are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Lof,
    Uniform,
    Cluster,
    Full,
}

/// Per-trajectory selection record for the ablation tooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub task: usize,
    pub trajectory_id: u64,
    pub method: SelectionMethod,
    pub length: usize,
    pub indices: Vec<usize>,
    /// LOF scores of the selected frames; empty for non-LOF methods.
    pub scores: Vec<f64>,
    pub retention: f64,
}
