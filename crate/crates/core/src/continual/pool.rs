use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{PairSet, TaskSpec};
use crate::encoder::{plain_features, Backbone, PromptSet};
use crate::error::{Error, Result};
use crate::numerics::{RngStreams, Tensor};

pub const KMEANS_ITERATIONS: usize = 20;

/// Unit-norm cluster centres of a task's prompt-free vision features.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskKey {
    /// `[C, d_joint]`.
    pub centroids: Tensor,
}

impl TaskKey {
    pub fn len(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Highest cosine between `query` and any centroid.
    pub fn best_cosine(&self, query: &[f64]) -> f64 {
        let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        (0..self.len())
            .map(|c| {
                let dot: f64 = self.centroids.row(c).iter().zip(query).map(|(a, b)| a * b).sum();
                dot / qn
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub task: TaskSpec,
    pub prompts: PromptSet,
    pub key: TaskKey,
}

/// Frozen per-task prompt sets and keys, in training order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptPool {
    pub entries: Vec<PoolEntry>,
}

impl PromptPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: PoolEntry) -> Result<()> {
        if !entry.prompts.is_frozen() {
            return Err(Error::Prompt {
                task_id: entry.task.task_id,
                msg: "only frozen prompt sets enter the pool".into(),
            });
        }
        self.entries.push(entry);
        Ok(())
    }

    /// The pool as it stood after the first `stage` tasks.
    pub fn prefix(&self, stage: usize) -> PromptPool {
        PromptPool {
            entries: self.entries[..stage.min(self.len())].to_vec(),
        }
    }

    pub fn position(&self, task_id: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.task.task_id == task_id)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centres: &[Vec<f64>]) -> usize {
    let mut best = 0;
    for (c, centre) in centres.iter().enumerate().skip(1) {
        if sq_dist(point, centre) < sq_dist(point, &centres[best]) {
            best = c;
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding; centroids are returned
/// L2-normalized. `points` must hold at least `k` rows.
pub fn kmeans(points: &[Vec<f64>], k: usize, iterations: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if k == 0 || points.len() < k {
        return Err(Error::domain("kmeans", format!("{} points for {k} clusters", points.len())));
    }
    let mut centres = vec![points[rng.gen_range(0..points.len())].clone()];
    while centres.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centres[nearest(p, &centres)])).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        centres.push(points[pick].clone());
    }
    let dim = points[0].len();
    for _ in 0..iterations {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let c = nearest(p, &centres);
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    for c in &mut centres {
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::domain("kmeans", "centroid with zero norm"));
        }
        c.iter_mut().for_each(|x| *x /= n);
    }
    Ok(centres)
}

/// Cluster the prompt-free vision features of `train` into at most
/// `centroids` centres.
pub fn build_task_key(
    backbone: &Backbone,
    train: &PairSet,
    centroids: usize,
    streams: &RngStreams,
    stream: &str,
) -> Result<TaskKey> {
    let feats = plain_features(backbone, train, true)?;
    let points: Vec<Vec<f64>> = (0..feats.shape()[0]).map(|i| feats.row(i).to_vec()).collect();
    key_from_features(&points, centroids, streams, stream)
}

pub fn key_from_features(points: &[Vec<f64>], centroids: usize, streams: &RngStreams, stream: &str) -> Result<TaskKey> {
    if points.is_empty() {
        return Err(Error::Data("task key needs at least one sample".into()));
    }
    let c = if points.len() < centroids {
        log::warn!("only {} samples for {centroids} centroids; reducing", points.len());
        points.len()
    } else {
        centroids
    };
    let centres = kmeans(points, c, KMEANS_ITERATIONS, &mut streams.stream(stream))?;
    Ok(TaskKey {
        centroids: Tensor::from_rows(&centres)?,
    })
}

/// Task whose nearest centroid has the highest cosine with `query`; ties go
/// to the earliest task.
pub fn predict_task(query: &[f64], pool: &PromptPool) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for e in &pool.entries {
        let s = e.key.best_cosine(query);
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((e.task.task_id, s));
        }
    }
    best.map(|(t, _)| t).ok_or(Error::EmptyPool)
}

/// Token ids of a task name: letters `a..z` map to ids `0..26`; other
/// characters are skipped.
pub fn name_tokens(name: &str) -> Vec<usize> {
    name.bytes()
        .filter(u8::is_ascii_alphabetic)
        .map(|b| (b.to_ascii_lowercase() - b'a') as usize)
        .collect()
}

/// Mean of the frozen token-table rows of the name's letters.
pub fn task_name_embedding(backbone: &Backbone, name: &str) -> Result<Vec<f64>> {
    let ids = name_tokens(name);
    if ids.is_empty() {
        return Err(Error::Config(format!("task name `{name}` has no letters")));
    }
    backbone.mean_token_embedding(&ids)
}
