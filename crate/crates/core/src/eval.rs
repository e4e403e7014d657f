//! Correlation metrics, the paired t-test and the deformation sweep.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::imaging::{deform, derive_seed, DatasetSplit, DeformKind, Image};
use crate::model::Model;
use crate::scoring::{quality_score, AnchorCache, CalibrationStats, ScoreConfig};

fn check_pair(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::domain(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < min {
        return Err(Error::domain(format!("need at least {min} samples, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite sample"));
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::domain("correlation of a constant sample is undefined"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson on average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 3)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 3)?;
    pearson(x, y)
}

/// Paired t statistic and two-sided p-value of `a − b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    check_pair(a, b, 2)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(Error::degenerate("differences have zero variance"));
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::domain(e.to_string()))?;
    Ok((t, 2.0 * dist.cdf(-t.abs())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub srcc: f64,
    pub plcc: f64,
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub n: usize,
}

impl EvalMetrics {
    pub fn correlations(x: &[f64], y: &[f64]) -> Result<Self> {
        Ok(Self { srcc: srcc(x, y)?, plcc: plcc(x, y)?, t: None, p: None, n: x.len() })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// An undeformed image to sweep, with its plane index.
#[derive(Clone, Debug)]
pub struct SweepBase<'a> {
    pub id: String,
    pub plane: usize,
    pub image: &'a Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub image: String,
    pub kind: DeformKind,
    pub severity: f64,
    #[serde(rename = "Q")]
    pub q: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// SRCC and PLCC of (severity, Q) per kind.
    pub per_kind: BTreeMap<String, EvalMetrics>,
}

impl SweepResult {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The first `n` undeformed query images, taken round-robin over planes.
pub fn pristine_bases<'d>(data: &'d DatasetSplit, model: &Model, n: usize) -> Result<Vec<SweepBase<'d>>> {
    let mut pools: Vec<_> =
        data.query.iter().map(|q| q.iter().filter(|(_, img)| img.meta.severity.unwrap_or(0.0) == 0.0).peekable()).collect();
    let mut bases = Vec::with_capacity(n);
    let mut c = 0;
    while bases.len() < n && pools.iter_mut().any(|p| p.peek().is_some()) {
        if let Some((id, img)) = pools[c].next() {
            bases.push(SweepBase { id: id.clone(), plane: model.plane_index(&data.planes[c].name)?, image: img });
        }
        c = (c + 1) % pools.len();
    }
    if bases.len() < n {
        return Err(Error::config(format!("asked for {n} sweep images but the query split has only {} undeformed ones", bases.len())));
    }
    Ok(bases)
}

/// `levels` evenly spaced severities from 0 to 1.
pub fn severity_levels(levels: usize) -> Vec<f64> {
    match levels {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Deforms every base image at every kind and severity and scores it. One
/// deformation seed per (image, kind) keeps the direction fixed while the
/// severity grows.
#[allow(clippy::too_many_arguments)]
pub fn severity_sweep(
    model: &Model,
    stats: &CalibrationStats,
    cache: &AnchorCache,
    bases: &[SweepBase<'_>],
    kinds: &[DeformKind],
    levels: &[f64],
    seed: u64,
    cfg: &ScoreConfig,
) -> Result<SweepResult> {
    cache.check(model)?;
    let cells: Vec<(usize, DeformKind, f64)> =
        (0..bases.len()).flat_map(|i| kinds.iter().flat_map(move |&k| levels.iter().map(move |&s| (i, k, s)))).collect();
    let rows = cells
        .par_iter()
        .map(|&(i, kind, severity)| {
            let base = &bases[i];
            let s = derive_seed(seed, &[i as u64, kind as u64]);
            let img = deform(base.image, kind, severity, s)?;
            let report = quality_score(model, &base.id, &img, base.plane, cache.plane(base.plane)?, stats, cfg)?;
            Ok(SweepRow { image: base.id.clone(), kind, severity, q: report.q })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_kind = BTreeMap::new();
    for &kind in kinds {
        let (sev, q): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.kind == kind).map(|r| (r.severity, r.q)).unzip();
        if let (Ok(s), Ok(p)) = (srcc(&sev, &q), plcc(&sev, &q)) {
            per_kind.insert(kind.name().to_string(), EvalMetrics { srcc: s, plcc: p, t: None, p: None, n: sev.len() });
        }
    }
    Ok(SweepResult { rows, per_kind })
}
