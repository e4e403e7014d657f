//! Reference-anchor selection.
//!
//! Every strategy works on indices into one plane's candidate list and
//! returns them sorted ascending.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::imaging::{DatasetSplit, Image};

/// Embedding of a candidate and its squared deviation from the plane mean.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorScore {
    pub id: String,
    pub embedding: Vec<f64>,
    pub sigma2: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `σ² = ‖e − μ‖² / d` for each embedding.
pub fn score_embeddings(ids: Vec<String>, embeddings: Vec<Vec<f64>>) -> Result<Vec<AnchorScore>> {
    if embeddings.is_empty() {
        return Err(Error::domain("cannot score an empty plane"));
    }
    if ids.len() != embeddings.len() {
        return Err(Error::dimension(format!("{} ids for {} embeddings", ids.len(), embeddings.len())));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::dimension("embeddings must share a positive length"));
    }
    let n = embeddings.len() as f64;
    let mut mu = vec![0.0; d];
    for e in &embeddings {
        mu.iter_mut().zip(e).for_each(|(m, x)| *m += x / n);
    }
    Ok(ids
        .into_iter()
        .zip(embeddings)
        .map(|(id, embedding)| {
            let sigma2 = sq_dist(&embedding, &mu) / d as f64;
            AnchorScore { id, embedding, sigma2 }
        })
        .collect())
}

/// Embeds every image of one plane (in parallel) and scores it.
pub fn embed_all(encoder: &Encoder, images: &[(String, Image)]) -> Result<Vec<AnchorScore>> {
    let embeddings = images.par_iter().map(|(_, img)| encoder.embedding(img)).collect::<Result<Vec<_>>>()?;
    score_embeddings(images.iter().map(|(id, _)| id.clone()).collect(), embeddings)
}

/// The `k1` smallest `σ²`, ties by lowest index.
pub fn select_variance_spectrum(scores: &[AnchorScore], k1: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].sigma2.total_cmp(&scores[j].sigma2).then(i.cmp(&j)));
    order.truncate(k1);
    order.sort_unstable();
    order
}

/// Uniform without replacement.
pub fn select_random(n: usize, k1: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, k1.min(n)).into_vec();
    picked.sort_unstable();
    picked
}

fn distance_matrix(embeddings: &[Vec<f64>]) -> Vec<Vec<f64>> {
    embeddings.iter().map(|a| embeddings.iter().map(|b| sq_dist(a, b).sqrt()).collect()).collect()
}

/// Sum over points of the distance to the nearest medoid.
pub fn kmedoids_cost(dist: &[Vec<f64>], medoids: &[usize]) -> f64 {
    dist.iter().map(|row| medoids.iter().map(|&m| row[m]).fold(f64::INFINITY, f64::min)).sum()
}

pub const KMEDOIDS_MAX_SWAPS: usize = 50;

/// PAM from a seeded random start; also returns the objective after the
/// start and after each accepted swap.
pub fn kmedoids_trace(embeddings: &[Vec<f64>], k1: usize, seed: u64) -> (Vec<usize>, Vec<f64>) {
    let n = embeddings.len();
    if k1 >= n {
        return ((0..n).collect(), Vec::new());
    }
    let dist = distance_matrix(embeddings);
    let mut medoids = select_random(n, k1, seed);
    let mut cost = kmedoids_cost(&dist, &medoids);
    let mut trace = vec![cost];
    for _ in 0..KMEDOIDS_MAX_SWAPS {
        let mut best: Option<(f64, usize, usize)> = None;
        for slot in 0..k1 {
            for o in 0..n {
                if medoids.contains(&o) {
                    continue;
                }
                let mut trial = medoids.clone();
                trial[slot] = o;
                let c = kmedoids_cost(&dist, &trial);
                if c < best.map_or(cost, |b| b.0) - 1e-12 {
                    best = Some((c, slot, o));
                }
            }
        }
        let Some((c, slot, o)) = best else { break };
        medoids[slot] = o;
        cost = c;
        trace.push(cost);
    }
    medoids.sort_unstable();
    (medoids, trace)
}

pub fn select_kmedoids(embeddings: &[Vec<f64>], k1: usize, seed: u64) -> Vec<usize> {
    kmedoids_trace(embeddings, k1, seed).0
}

/// Farthest-first traversal from the point nearest the centroid; ties by
/// lowest index.
pub fn select_kcenter_greedy(embeddings: &[Vec<f64>], k1: usize) -> Vec<usize> {
    let n = embeddings.len();
    if n == 0 || k1 == 0 {
        return Vec::new();
    }
    let d = embeddings[0].len();
    let mut centroid = vec![0.0; d];
    for e in embeddings {
        centroid.iter_mut().zip(e).for_each(|(c, x)| *c += x / n as f64);
    }
    let argbest = |key: &dyn Fn(usize) -> f64, cands: &mut dyn Iterator<Item = usize>| {
        cands.fold(None::<(usize, f64)>, |acc, i| match acc {
            Some((_, b)) if key(i) <= b => acc,
            _ => Some((i, key(i))),
        })
    };
    let first = argbest(&|i| -sq_dist(&embeddings[i], &centroid), &mut (0..n)).expect("non-empty").0;
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = embeddings.iter().map(|e| sq_dist(e, &embeddings[first])).collect();
    while chosen.len() < k1.min(n) {
        let next = argbest(&|i| nearest[i], &mut (0..n).filter(|i| !chosen.contains(i))).expect("candidates left").0;
        chosen.push(next);
        for (i, e) in embeddings.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(e, &embeddings[next]));
        }
    }
    chosen.sort_unstable();
    chosen
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorStrategy {
    #[default]
    Variance,
    Random,
    Kmedoids,
    Kcenter,
}

impl AnchorStrategy {
    pub const ALL: [AnchorStrategy; 4] =
        [AnchorStrategy::Variance, AnchorStrategy::Random, AnchorStrategy::Kmedoids, AnchorStrategy::Kcenter];

    pub fn name(self) -> &'static str {
        match self {
            AnchorStrategy::Variance => "variance",
            AnchorStrategy::Random => "random",
            AnchorStrategy::Kmedoids => "kmedoids",
            AnchorStrategy::Kcenter => "kcenter",
        }
    }

    pub fn select(self, scores: &[AnchorScore], k1: usize, seed: u64) -> Vec<usize> {
        let embeddings = || scores.iter().map(|s| s.embedding.clone()).collect::<Vec<_>>();
        match self {
            AnchorStrategy::Variance => select_variance_spectrum(scores, k1),
            AnchorStrategy::Random => select_random(scores.len(), k1, seed),
            AnchorStrategy::Kmedoids => select_kmedoids(&embeddings(), k1, seed),
            AnchorStrategy::Kcenter => select_kcenter_greedy(&embeddings(), k1),
        }
    }
}

impl fmt::Display for AnchorStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnchorStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| Error::config(format!("unknown anchor strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorEntry {
    pub path: String,
    pub plane: String,
    pub sigma2: f64,
}

/// Selected anchors, indexed by plane id.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub planes: Vec<Vec<AnchorEntry>>,
}

impl AnchorSet {
    pub fn for_plane(&self, plane: usize) -> Result<&[AnchorEntry]> {
        match self.planes.get(plane) {
            Some(a) if !a.is_empty() => Ok(a),
            _ => Err(Error::config(format!("no anchors for plane {plane}"))),
        }
    }

    /// Resolves anchor paths against the corpus.
    pub fn images<'d>(&self, data: &'d DatasetSplit, plane: usize) -> Result<Vec<&'d Image>> {
        self.for_plane(plane)?
            .iter()
            .map(|a| data.find(&a.path).ok_or_else(|| Error::config(format!("anchor {} not in the corpus", a.path))))
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for entry in self.planes.iter().flatten() {
            w.serialize(entry)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Groups rows by the corpus's plane names.
    pub fn read_csv(path: impl AsRef<Path>, data: &DatasetSplit) -> Result<Self> {
        let mut planes = vec![Vec::new(); data.planes.len()];
        for row in csv::Reader::from_path(path)?.deserialize() {
            let entry: AnchorEntry = row?;
            let plane = data
                .plane_by_name(&entry.plane)
                .ok_or_else(|| Error::config(format!("anchor plane {:?} not in the corpus", entry.plane)))?;
            planes[plane.id].push(entry);
        }
        Ok(Self { planes })
    }
}

/// Runs `strategy` on each plane's pool.
pub fn select_anchors(encoder: &Encoder, data: &DatasetSplit, strategy: AnchorStrategy, k1: usize, seed: u64) -> Result<AnchorSet> {
    if k1 == 0 {
        return Err(Error::config("k1 must be at least 1"));
    }
    let planes = data
        .planes
        .iter()
        .zip(&data.pool)
        .map(|(label, pool)| {
            let scores = embed_all(encoder, pool)?;
            let picked = strategy.select(&scores, k1, crate::imaging::derive_seed(seed, &[label.id as u64]));
            Ok(picked
                .into_iter()
                .map(|i| AnchorEntry { path: scores[i].id.clone(), plane: label.name.clone(), sigma2: scores[i].sigma2 })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(AnchorSet { planes })
}
