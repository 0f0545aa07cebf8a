use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::GazeDataset;
use crate::error::{Error, Result};

pub const DEFAULT_CLUSTERS: usize = 15;
const MAX_ITERS: usize = 100;

/// K-means partition of gaze labels in (pitch, yaw) space.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<[f64; 2]>,
    pub assignments: Vec<usize>,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Nearest centroid, lowest index on ties.
pub fn nearest(centroids: &[[f64; 2]], p: [f64; 2]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, &c) in centroids.iter().enumerate() {
        let d = dist2(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn kmeans_pp(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && t < d {
                    chosen = i;
                    break;
                }
                t -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick];
        centroids.push(c);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, c));
        }
    }
    centroids
}

/// Means of the assigned points. An empty cluster is re-seeded with the
/// point farthest from its current centroid.
fn update(points: &[[f64; 2]], assign: &[usize], k: usize) -> Vec<[f64; 2]> {
    let mut sum = vec![[0.0f64; 2]; k];
    let mut count = vec![0usize; k];
    for (&p, &a) in points.iter().zip(assign) {
        sum[a][0] += p[0];
        sum[a][1] += p[1];
        count[a] += 1;
    }
    let mut centroids: Vec<[f64; 2]> = sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| {
            if n > 0 {
                [s[0] / n as f64, s[1] / n as f64]
            } else {
                [f64::NAN; 2]
            }
        })
        .collect();
    let mut taken = vec![false; points.len()];
    for c in 0..k {
        if count[c] > 0 {
            continue;
        }
        let far = (0..points.len())
            .filter(|&i| !taken[i])
            .max_by(|&i, &j| {
                let di = dist2(points[i], centroids[assign[i]]);
                let dj = dist2(points[j], centroids[assign[j]]);
                di.total_cmp(&dj).then(j.cmp(&i))
            })
            .expect("at least k points");
        taken[far] = true;
        centroids[c] = points[far];
    }
    centroids
}

/// Lloyd's algorithm from a k-means++ start. Stops when assignments no
/// longer change, so the result is a fixed point of [`lloyd_step`].
pub fn kmeans(points: &[[f64; 2]], k: usize, seed: u64) -> Result<ClusterModel> {
    if k == 0 || points.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least k = {k} points, got {}",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut assign: Vec<usize> = points.iter().map(|&p| nearest(&centroids, p)).collect();
    for _ in 0..MAX_ITERS {
        centroids = update(points, &assign, k);
        let next: Vec<usize> = points.iter().map(|&p| nearest(&centroids, p)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok(ClusterModel {
        k,
        centroids,
        assignments: assign,
    })
}

/// One Lloyd iteration from a model's assignments.
pub fn lloyd_step(points: &[[f64; 2]], model: &ClusterModel) -> ClusterModel {
    let centroids = update(points, &model.assignments, model.k);
    let assignments = points.iter().map(|&p| nearest(&centroids, p)).collect();
    ClusterModel {
        k: model.k,
        centroids,
        assignments,
    }
}

pub fn label_points(data: &GazeDataset) -> Vec<[f64; 2]> {
    data.samples
        .iter()
        .map(|s| [s.gaze.pitch as f64, s.gaze.yaw as f64])
        .collect()
}

pub fn kmeans_cluster(data: &GazeDataset, k: usize, seed: u64) -> Result<ClusterModel> {
    kmeans(&label_points(data), k, seed)
}

impl ClusterModel {
    pub fn inertia(&self, points: &[[f64; 2]]) -> f64 {
        points
            .iter()
            .zip(&self.assignments)
            .map(|(&p, &a)| dist2(p, self.centroids[a]))
            .sum()
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &a) in self.assignments.iter().enumerate() {
            out[a].push(i);
        }
        out
    }
}

/// Endless round-robin over clusters. Each cluster yields its members in a
/// shuffled order and reshuffles once exhausted; empty clusters are skipped.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    clusters: Vec<Vec<usize>>,
    queues: Vec<Vec<usize>>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(model: &ClusterModel, seed: u64) -> Self {
        Self::from_members(model.members(), seed)
    }

    pub fn from_members(members: Vec<Vec<usize>>, seed: u64) -> Self {
        let clusters: Vec<Vec<usize>> = members.into_iter().filter(|m| !m.is_empty()).collect();
        Self {
            queues: vec![Vec::new(); clusters.len()],
            clusters,
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn active_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Next sample index, or `None` if every cluster is empty.
    pub fn next_index(&mut self) -> Option<usize> {
        if self.clusters.is_empty() {
            return None;
        }
        let c = self.cursor % self.clusters.len();
        self.cursor += 1;
        if self.queues[c].is_empty() {
            let mut q = self.clusters[c].clone();
            q.shuffle(&mut self.rng);
            self.queues[c] = q;
        }
        self.queues[c].pop()
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        (0..batch_size).map_while(|_| self.next_index()).collect()
    }
}

/// `n_batches` balanced batches of `batch_size` sample indices.
pub fn balanced_batches(
    model: &ClusterModel,
    batch_size: usize,
    n_batches: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut s = BalancedSampler::new(model, seed);
    (0..n_batches).map(|_| s.next_batch(batch_size)).collect()
}
