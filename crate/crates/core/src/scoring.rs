//! Calibration of the loss terms and the quality score.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::encoder::LEVELS;
use crate::error::{Error, Result};
use crate::imaging::{DatasetSplit, Image};
use crate::model::{LevelFeatures, Model, PairTerms};
use crate::numerics::{Tensor, TensorArchive};

pub const TERMS: [&str; 3] = ["sim", "ncc", "smooth"];

/// `(v − min)/(max − min)` clamped to `[0, 1]`; 0 for a degenerate window.
pub fn phi_value(v: f64, min: f64, max: f64) -> f64 {
    if max <= min {
        return 0.0;
    }
    ((v - min) / (max - min)).clamp(0.0, 1.0)
}

/// Per-plane, per-term running extrema.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationStats {
    pub planes: Vec<String>,
    ranges: Vec<[(f64, f64); 3]>,
    frozen: bool,
}

impl CalibrationStats {
    pub fn new(planes: Vec<String>) -> Self {
        let ranges = vec![[(f64::INFINITY, f64::NEG_INFINITY); 3]; planes.len()];
        Self { planes, ranges, frozen: false }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn check_mutable(&self) -> Result<()> {
        if self.frozen {
            return Err(Error::state("calibration statistics are frozen"));
        }
        Ok(())
    }

    fn check_plane(&self, plane: usize) -> Result<()> {
        if plane >= self.planes.len() {
            return Err(Error::calibration(format!("plane {plane} out of {}", self.planes.len())));
        }
        Ok(())
    }

    pub fn observe(&mut self, plane: usize, terms: &PairTerms) -> Result<()> {
        self.check_mutable()?;
        self.check_plane(plane)?;
        for (r, v) in self.ranges[plane].iter_mut().zip(terms.as_array()) {
            if !v.is_finite() {
                return Err(Error::calibration(format!("non-finite loss {v} on plane {plane}")));
            }
            *r = (r.0.min(v), r.1.max(v));
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &CalibrationStats) -> Result<()> {
        self.check_mutable()?;
        if other.planes != self.planes {
            return Err(Error::calibration("cannot merge statistics over different planes"));
        }
        for (mine, theirs) in self.ranges.iter_mut().zip(&other.ranges) {
            for (m, t) in mine.iter_mut().zip(theirs) {
                *m = (m.0.min(t.0), m.1.max(t.1));
            }
        }
        Ok(())
    }

    /// Fails when some plane saw no observations.
    pub fn freeze(&mut self) -> Result<()> {
        if let Some(c) = self.ranges.iter().position(|r| r[0].0 > r[0].1) {
            return Err(Error::calibration(format!("plane {:?} has no calibration data", self.planes[c])));
        }
        self.frozen = true;
        Ok(())
    }

    pub fn range(&self, plane: usize, term: usize) -> Result<(f64, f64)> {
        self.check_plane(plane)?;
        self.ranges[plane].get(term).copied().ok_or_else(|| Error::calibration(format!("term index {term} out of {}", TERMS.len())))
    }

    pub fn phi(&self, value: f64, term: usize, plane: usize) -> Result<f64> {
        if !self.frozen {
            return Err(Error::state("calibration statistics must be frozen before normalising"));
        }
        let (lo, hi) = self.range(plane, term)?;
        Ok(phi_value(value, lo, hi))
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        if !self.frozen {
            return Err(Error::state("only frozen statistics are saved"));
        }
        let mut ar = TensorArchive::new();
        for (name, r) in self.planes.iter().zip(&self.ranges) {
            for (term, (lo, hi)) in TERMS.iter().zip(r) {
                ar.insert(format!("calib.{name}.{term}.min"), Tensor::scalar(*lo));
                ar.insert(format!("calib.{name}.{term}.max"), Tensor::scalar(*hi));
            }
        }
        Ok(ar)
    }

    pub fn from_archive(ar: &TensorArchive, planes: &[String]) -> Result<Self> {
        let mut stats = Self::new(planes.to_vec());
        for (name, r) in planes.iter().zip(stats.ranges.iter_mut()) {
            for (term, slot) in TERMS.iter().zip(r.iter_mut()) {
                let lo = ar.get_scalar(&format!("calib.{name}.{term}.min"))?;
                let hi = ar.get_scalar(&format!("calib.{name}.{term}.max"))?;
                if lo > hi {
                    return Err(Error::format(format!("calib.{name}.{term}: min above max")));
                }
                *slot = (lo, hi);
            }
        }
        stats.frozen = true;
        Ok(stats)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>, planes: &[String]) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?, planes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    /// Weights of sim, ncc and smooth.
    pub weights: [f64; 3],
    pub tau: f64,
    /// Skip the division by `Σ w`.
    pub literal_formula: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { weights: [1.0; 3], tau: 0.5, literal_formula: false }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) || self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("score.weights must be non-negative with a positive sum"));
        }
        if !self.tau.is_finite() {
            return Err(Error::config("score.tau must be finite"));
        }
        Ok(())
    }
}

/// `1 − mean_j Σ_m w_m φ_jm / Σ_m w_m` (without the division when
/// `literal`).
pub fn combine(normalised: &[[f64; 3]], weights: &[f64; 3], literal: bool) -> Result<f64> {
    if normalised.is_empty() {
        return Err(Error::scoring("no anchors to score against"));
    }
    let wsum: f64 = if literal { 1.0 } else { weights.iter().sum() };
    let mean =
        normalised.iter().map(|phi| phi.iter().zip(weights).map(|(p, w)| p * w).sum::<f64>() / wsum).sum::<f64>() / normalised.len() as f64;
    Ok(1.0 - mean)
}

pub fn decide(q: f64, tau: f64) -> bool {
    q > tau
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTerms {
    pub anchor: String,
    pub raw: PairTerms,
    pub normalised: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub query: String,
    pub plane: String,
    pub per_anchor: Vec<AnchorTerms>,
    pub q: f64,
    pub accepted: bool,
    pub tau: f64,
}

impl QualityReport {
    pub fn mean_raw(&self) -> [f64; 3] {
        let n = self.per_anchor.len() as f64;
        let mut out = [0.0; 3];
        for a in &self.per_anchor {
            out.iter_mut().zip(a.raw.as_array()).for_each(|(o, v)| *o += v / n);
        }
        out
    }

    pub fn mean_normalised(&self) -> [f64; 3] {
        let n = self.per_anchor.len() as f64;
        let mut out = [0.0; 3];
        for a in &self.per_anchor {
            out.iter_mut().zip(a.normalised).for_each(|(o, v)| *o += v / n);
        }
        out
    }
}

/// Row of the score CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub path: String,
    pub plane: String,
    #[serde(rename = "Q")]
    pub q: f64,
    pub accepted: bool,
    pub sim_raw: f64,
    pub ncc_raw: f64,
    pub smooth_raw: f64,
    pub sim_norm: f64,
    pub ncc_norm: f64,
    pub smooth_norm: f64,
}

impl From<&QualityReport> for ScoreRow {
    fn from(r: &QualityReport) -> Self {
        let (raw, norm) = (r.mean_raw(), r.mean_normalised());
        Self {
            path: r.query.clone(),
            plane: r.plane.clone(),
            q: r.q,
            accepted: r.accepted,
            sim_raw: raw[0],
            ncc_raw: raw[1],
            smooth_raw: raw[2],
            sim_norm: norm[0],
            ncc_norm: norm[1],
            smooth_norm: norm[2],
        }
    }
}

/// Anchor features of one plane, precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedAnchor {
    pub path: String,
    pub features: LevelFeatures,
    /// Pooled backbone vectors the synergy selection saw.
    pub pooled: [Vec<f64>; LEVELS],
}

impl CachedAnchor {
    pub fn compute(model: &Model, path: &str, img: &Image) -> Result<Self> {
        let backbone = model.encoder.backbone(img)?;
        Ok(Self { path: path.to_string(), features: model.features_from(&backbone)?, pooled: [0, 1, 2].map(|l| backbone.pooled(l)) })
    }
}

/// Anchor features for every plane, keyed by the model hash.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorCache {
    pub key: String,
    pub planes: Vec<Vec<CachedAnchor>>,
}

impl AnchorCache {
    pub fn build(model: &Model, anchors: &AnchorSet, data: &DatasetSplit) -> Result<Self> {
        let planes = (0..model.planes.len())
            .map(|c| {
                let entries = anchors.for_plane(c)?;
                let images = anchors.images(data, c)?;
                entries.par_iter().zip(images).map(|(e, img)| CachedAnchor::compute(model, &e.path, img)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Self { key: model.hash()?, planes })
    }

    /// Rejects a cache built for a different checkpoint.
    pub fn check(&self, model: &Model) -> Result<()> {
        let hash = model.hash()?;
        if hash != self.key {
            return Err(Error::state(format!("anchor cache was built for model {}, not {hash}", self.key)));
        }
        Ok(())
    }

    pub fn plane(&self, plane: usize) -> Result<&[CachedAnchor]> {
        match self.planes.get(plane) {
            Some(a) if !a.is_empty() => Ok(a),
            _ => Err(Error::scoring(format!("no anchors for plane {plane}"))),
        }
    }
}

/// Scores `query` against precomputed anchor features of its plane.
pub fn quality_score(
    model: &Model,
    query_id: &str,
    query: &Image,
    plane: usize,
    anchors: &[CachedAnchor],
    stats: &CalibrationStats,
    cfg: &ScoreConfig,
) -> Result<QualityReport> {
    if anchors.is_empty() {
        return Err(Error::scoring(format!("plane {plane} has no anchors")));
    }
    if !stats.is_frozen() {
        return Err(Error::state("scoring needs frozen calibration statistics"));
    }
    let plane_name = model.planes.get(plane).ok_or_else(|| Error::scoring(format!("unknown plane {plane}")))?;
    let qf = model.features(query)?;
    let per_anchor = anchors
        .iter()
        .map(|a| {
            let raw = model.register(&a.features, &qf)?;
            let v = raw.as_array();
            let normalised = [stats.phi(v[0], 0, plane)?, stats.phi(v[1], 1, plane)?, stats.phi(v[2], 2, plane)?];
            Ok(AnchorTerms { anchor: a.path.clone(), raw, normalised })
        })
        .collect::<Result<Vec<_>>>()?;
    let norms: Vec<[f64; 3]> = per_anchor.iter().map(|a| a.normalised).collect();
    let q = combine(&norms, &cfg.weights, cfg.literal_formula)?;
    Ok(QualityReport { query: query_id.to_string(), plane: plane_name.clone(), per_anchor, q, accepted: decide(q, cfg.tau), tau: cfg.tau })
}

/// Same as [`quality_score`] but computes anchor features on the spot.
pub fn quality_score_uncached(
    model: &Model,
    query_id: &str,
    query: &Image,
    plane: usize,
    anchors: &[(&str, &Image)],
    stats: &CalibrationStats,
    cfg: &ScoreConfig,
) -> Result<QualityReport> {
    let cached = anchors.iter().map(|(p, img)| CachedAnchor::compute(model, p, img)).collect::<Result<Vec<_>>>()?;
    quality_score(model, query_id, query, plane, &cached, stats, cfg)
}

/// Registers every training image against every anchor of its plane and
/// freezes the observed extrema.
pub fn calibrate(model: &Model, data: &DatasetSplit, cache: &AnchorCache) -> Result<CalibrationStats> {
    cache.check(model)?;
    let mut stats = CalibrationStats::new(model.planes.clone());
    for (c, train) in data.train.iter().enumerate().take(model.planes.len()) {
        if train.is_empty() {
            return Err(Error::calibration(format!("plane {:?} has no training images", model.planes[c])));
        }
        let anchors = cache.plane(c).map_err(|e| Error::calibration(e.to_string()))?;
        let shards = train
            .par_iter()
            .map(|(_, img)| {
                let mut shard = CalibrationStats::new(model.planes.clone());
                let qf = model.features(img)?;
                for a in anchors {
                    shard.observe(c, &model.register(&a.features, &qf)?)?;
                }
                Ok(shard)
            })
            .collect::<Result<Vec<_>>>()?;
        for s in &shards {
            stats.merge(s)?;
        }
    }
    stats.freeze()?;
    Ok(stats)
}
