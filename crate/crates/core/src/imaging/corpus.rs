//! Procedural stand-in for a multi-plane ultrasound corpus.
//!
//! Each plane has an archetype: a fan-shaped sector of dim tissue with 3–5
//! ellipse or crescent structures at plane-specific positions. Individual
//! images jitter the archetype, multiply by Rayleigh speckle and blur with
//! a 3×3 box. Degraded images are then deformed with a random kind and
//! severity, and carry `score = 1 − severity`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::deform::{deform, DeformKind};
use super::pgm::{load_pgm, save_pgm};
use super::{derive_seed, Image, PlaneLabel, MIN_SIDE};
use crate::error::{Error, Result};

const PLANE_NAMES: [&str; 6] = ["abdomen", "four_chamber", "kidney", "face", "femur", "spine"];
const SPECKLE_SIGMA: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub planes: usize,
    pub image_size: usize,
    /// Anchor candidates per plane.
    pub pool_per_plane: usize,
    /// Training images per plane (k2).
    pub train_per_plane: usize,
    pub query_per_plane: usize,
    /// Anchors to be selected per plane; must satisfy `k1 <= k2 / 5`.
    pub k1: usize,
    pub pool_degraded_fraction: f64,
    pub train_degraded_fraction: f64,
    pub query_degraded_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            planes: 2,
            image_size: 64,
            pool_per_plane: 40,
            train_per_plane: 100,
            query_per_plane: 30,
            k1: 20,
            pool_degraded_fraction: 0.4,
            train_degraded_fraction: 0.5,
            query_degraded_fraction: 0.5,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.planes == 0 {
            return Err(Error::config("corpus.planes must be at least 1"));
        }
        if self.image_size < MIN_SIDE {
            return Err(Error::config(format!("corpus.image_size must be at least {MIN_SIDE}")));
        }
        if self.k1 == 0 || self.pool_per_plane == 0 || self.query_per_plane == 0 {
            return Err(Error::config("corpus counts and k1 must be positive"));
        }
        validate_split_counts(self.k1, self.train_per_plane)?;
        if self.k1 > self.pool_per_plane {
            return Err(Error::config(format!("k1 = {} exceeds the anchor pool of {} per plane", self.k1, self.pool_per_plane)));
        }
        for (key, f) in [
            ("pool_degraded_fraction", self.pool_degraded_fraction),
            ("train_degraded_fraction", self.train_degraded_fraction),
            ("query_degraded_fraction", self.query_degraded_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!("corpus.{key} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

fn validate_split_counts(k1: usize, k2: usize) -> Result<()> {
    if k1 * 5 > k2 {
        return Err(Error::config(format!("k1 = {k1} violates k1 <= k2 / 5 with k2 = {k2}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pool,
    Train,
    Query,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Pool, Split::Train, Split::Query];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pool => "pool",
            Split::Train => "train",
            Split::Query => "query",
        }
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pool" => Ok(Split::Pool),
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            _ => Err(Error::format(format!("unknown split `{s}`"))),
        }
    }
}

/// Images per plane for the anchor pool (D_A candidates), training (D_B)
/// and query (D_C) splits, each entry paired with its corpus-relative path.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub planes: Vec<PlaneLabel>,
    pub pool: Vec<Vec<(String, Image)>>,
    pub train: Vec<Vec<(String, Image)>>,
    pub query: Vec<Vec<(String, Image)>>,
    pub k1: usize,
    pub k2: usize,
}

impl DatasetSplit {
    pub fn split(&self, split: Split) -> &[Vec<(String, Image)>] {
        match split {
            Split::Pool => &self.pool,
            Split::Train => &self.train,
            Split::Query => &self.query,
        }
    }

    pub fn plane_by_name(&self, name: &str) -> Option<&PlaneLabel> {
        self.planes.iter().find(|p| p.name == name)
    }

    /// Looks up an image by its corpus-relative path.
    pub fn find(&self, path: &str) -> Option<&Image> {
        Split::ALL.iter().flat_map(|&s| self.split(s).iter().flatten()).find(|(p, _)| p == path).map(|(_, img)| img)
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Bright,
    Dark,
    Crescent,
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    shape: Shape,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    intensity: f64,
}

#[derive(Clone, Debug)]
struct Archetype {
    half_angle: f64,
    blobs: Vec<Blob>,
}

impl Archetype {
    fn new(plane: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xA7C4, plane as u64]));
        let count = rng.random_range(3..=5);
        let blobs = (0..count)
            .map(|i| Blob {
                shape: match (i, rng.random_range(0..3)) {
                    (0, _) => Shape::Bright,
                    (1, _) => Shape::Dark,
                    (_, 0) => Shape::Bright,
                    (_, 1) => Shape::Dark,
                    _ => Shape::Crescent,
                },
                cx: rng.random_range(0.3..0.7),
                cy: rng.random_range(0.25..0.8),
                rx: rng.random_range(0.06..0.16),
                ry: rng.random_range(0.06..0.16),
                angle: rng.random_range(0.0..PI),
                intensity: rng.random_range(0.55..0.95),
            })
            .collect();
        Self { half_angle: rng.random_range(35f64..45.0).to_radians(), blobs }
    }

    fn jittered(&self, rng: &mut ChaCha8Rng) -> Self {
        let n = |s: f64| Normal::new(0.0, s).expect("finite sigma");
        let (pos, size, gain) = (n(0.012), n(0.05), n(0.05));
        let blobs = self
            .blobs
            .iter()
            .map(|b| Blob {
                cx: b.cx + pos.sample(rng),
                cy: b.cy + pos.sample(rng),
                rx: b.rx * (1.0 + size.sample(rng)).max(0.5),
                ry: b.ry * (1.0 + size.sample(rng)).max(0.5),
                intensity: (b.intensity * (1.0 + gain.sample(rng))).clamp(0.3, 1.0),
                ..*b
            })
            .collect();
        Self { half_angle: self.half_angle, blobs }
    }

    fn render(&self, size: usize) -> Vec<f64> {
        let scale = (size - 1) as f64;
        let mut px = vec![0.0; size * size];
        for (i, p) in px.iter_mut().enumerate() {
            let (u, v) = ((i % size) as f64 / scale, (i / size) as f64 / scale);
            let (du, dv) = (u - 0.5, v + 0.02);
            let r = (du * du + dv * dv).sqrt();
            let theta = du.atan2(dv).abs();
            let inside = smoothstep(0.02, -0.02, theta - self.half_angle) * smoothstep(0.02, -0.02, r - 0.95);
            let mut val = inside * 0.25 * (1.0 - 0.3 * v);
            for b in &self.blobs {
                let m = ellipse_mask(b, u, v, 1.0, 0.0, 0.0);
                match b.shape {
                    Shape::Bright => val += (b.intensity - val) * m,
                    Shape::Dark => val *= 1.0 - 0.9 * m,
                    Shape::Crescent => {
                        let inner = ellipse_mask(b, u, v, 0.85, 0.35, 0.2);
                        let ring = m * (1.0 - inner);
                        val += (b.intensity - val) * ring;
                    }
                }
            }
            *p = val.clamp(0.0, 1.0);
        }
        px
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft ellipse indicator, optionally shrunk and offset in the blob frame.
fn ellipse_mask(b: &Blob, u: f64, v: f64, shrink: f64, ox: f64, oy: f64) -> f64 {
    let (s, c) = b.angle.sin_cos();
    let (du, dv) = (u - b.cx, v - b.cy);
    let x = c * du + s * dv - ox * b.rx;
    let y = -s * du + c * dv - oy * b.ry;
    let rho = ((x / (b.rx * shrink)).powi(2) + (y / (b.ry * shrink)).powi(2)).sqrt();
    smoothstep(1.08, 0.92, rho)
}

fn speckle_and_blur(px: &[f64], size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mean = SPECKLE_SIGMA * (PI / 2.0).sqrt();
    let speckled: Vec<f64> = px
        .iter()
        .map(|&p| {
            let u: f64 = rng.random();
            let rayleigh = SPECKLE_SIGMA * (-2.0 * (1.0 - u).ln()).sqrt();
            p * rayleigh / mean
        })
        .collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (mut acc, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..=(y + 1).min(size - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(size - 1) {
                    acc += speckled[yy * size + xx];
                    n += 1.0;
                }
            }
            out[y * size + x] = (acc / n).clamp(0.0, 1.0);
        }
    }
    out
}

/// Noise-free canonical render of a plane's archetype.
pub fn render_archetype(plane: usize, size: usize, seed: u64) -> Result<Image> {
    Image::new(size, size, Archetype::new(plane, seed).render(size))
}

fn default_plane_name(id: usize) -> String {
    PLANE_NAMES.get(id).map_or_else(|| format!("plane{id}"), |s| s.to_string())
}

/// Renders one pristine (severity 0) sample of a plane.
fn render_sample(archetype: &Archetype, size: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = archetype.jittered(&mut rng).render(size);
    let mut img = Image::from_clipped(size, size, speckle_and_blur(&px, size, &mut rng))?;
    img.meta.severity = Some(0.0);
    img.meta.score = Some(1.0);
    Ok(img)
}

#[allow(clippy::too_many_arguments)]
fn render_split(
    archetype: &Archetype,
    plane: &PlaneLabel,
    split: Split,
    count: usize,
    degraded_fraction: f64,
    min_severity: f64,
    size: usize,
    seed: u64,
) -> Result<Vec<(String, Image)>> {
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[plane.id as u64, split.code(), 0x0D]));
    let n_degraded = (degraded_fraction * count as f64).round() as usize;
    let mut degraded: Vec<bool> = (0..count).map(|i| i < n_degraded).collect();
    degraded.shuffle(&mut order_rng);
    degraded
        .into_iter()
        .enumerate()
        .map(|(i, is_degraded)| {
            let tag = derive_seed(seed, &[plane.id as u64, split.code(), i as u64]);
            let mut img = render_sample(archetype, size, tag)?;
            if is_degraded {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tag, &[0xDEF0]));
                let kind = if rng.random::<bool>() { DeformKind::Rigid } else { DeformKind::Nonrigid };
                let severity = rng.random_range(min_severity..=1.0);
                img = deform(&img, kind, severity, rng.random())?;
            }
            let path = format!("{}/{}/img_{:05}.pgm", plane.name, split.name(), i);
            Ok((path, img.with_plane(plane.clone())))
        })
        .collect()
}

/// Generates the full corpus; a pure function of `(spec, seed)`.
pub fn gen_synthetic_corpus(spec: &CorpusSpec, seed: u64) -> Result<DatasetSplit> {
    spec.validate()?;
    let planes: Vec<PlaneLabel> = (0..spec.planes).map(|i| PlaneLabel::new(i, default_plane_name(i))).collect();
    let (mut pool, mut train, mut query) = (Vec::new(), Vec::new(), Vec::new());
    for plane in &planes {
        let arch = Archetype::new(plane.id, seed);
        let size = spec.image_size;
        pool.push(render_split(&arch, plane, Split::Pool, spec.pool_per_plane, spec.pool_degraded_fraction, 0.3, size, seed)?);
        train.push(render_split(&arch, plane, Split::Train, spec.train_per_plane, spec.train_degraded_fraction, 0.05, size, seed)?);
        query.push(render_split(&arch, plane, Split::Query, spec.query_per_plane, spec.query_degraded_fraction, 0.05, size, seed)?);
    }
    Ok(DatasetSplit { planes, pool, train, query, k1: spec.k1, k2: spec.train_per_plane })
}

/// One line of `manifest.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub plane: String,
    pub split: Split,
    pub severity: Option<f64>,
    pub score: Option<f64>,
}

/// Writes `<root>/<plane>/<split>/img_%05d.pgm` files plus `manifest.csv`.
pub fn write_corpus(data: &DatasetSplit, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let mut writer = csv::Writer::from_path(root.join("manifest.csv")).or_else(|_| {
        std::fs::create_dir_all(root)?;
        csv::Writer::from_path(root.join("manifest.csv"))
    })?;
    for split in Split::ALL {
        for images in data.split(split) {
            for (path, img) in images {
                let full = root.join(path);
                if let Some(dir) = full.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                save_pgm(img, &full)?;
                writer.serialize(ManifestRow {
                    path: path.clone(),
                    plane: img.plane.as_ref().map(|p| p.name.clone()).unwrap_or_default(),
                    split,
                    severity: img.meta.severity,
                    score: img.meta.score,
                })?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = root.as_ref().join("manifest.csv");
    if !path.exists() {
        return Err(Error::config(format!("missing corpus manifest {}", path.display())));
    }
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Loads a corpus written by [`write_corpus`]. Plane ids follow the order
/// in which plane names first appear in the manifest.
pub fn read_corpus(root: impl AsRef<Path>, k1: usize) -> Result<DatasetSplit> {
    let root = root.as_ref();
    let rows = read_manifest(root)?;
    let mut ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut planes = Vec::new();
    for row in &rows {
        if !ids.contains_key(&row.plane) {
            ids.insert(row.plane.clone(), planes.len());
            planes.push(PlaneLabel::new(planes.len(), row.plane.clone()));
        }
    }
    let empty = || vec![Vec::new(); planes.len()];
    let (mut pool, mut train, mut query) = (empty(), empty(), empty());
    for row in rows {
        let plane = planes[ids[&row.plane]].clone();
        let mut img = load_pgm(root.join(&row.path))?;
        img.meta.severity = row.severity;
        img.meta.score = row.score;
        let img = img.with_plane(plane.clone());
        let bucket = match row.split {
            Split::Pool => &mut pool,
            Split::Train => &mut train,
            Split::Query => &mut query,
        };
        bucket[plane.id].push((row.path, img));
    }
    let k2 = train.iter().map(Vec::len).min().unwrap_or(0);
    validate_split_counts(k1, k2)?;
    Ok(DatasetSplit { planes, pool, train, query, k1, k2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec { planes: 2, image_size: 32, pool_per_plane: 6, train_per_plane: 10, query_per_plane: 4, k1: 2, ..CorpusSpec::default() }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = gen_synthetic_corpus(&small_spec(), 7).unwrap();
        let b = gen_synthetic_corpus(&small_spec(), 7).unwrap();
        for split in Split::ALL {
            assert_eq!(a.split(split), b.split(split));
        }
        let c = gen_synthetic_corpus(&small_spec(), 8).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn planes_have_distinct_layouts() {
        for seed in 0..5 {
            let p0 = render_archetype(0, 64, seed).unwrap();
            let p1 = render_archetype(1, 64, seed).unwrap();
            let mad = p0.pixels().iter().zip(p1.pixels()).map(|(a, b)| (a - b).abs()).sum::<f64>() / (64.0 * 64.0);
            assert!(mad > 0.05, "seed {seed}: mean abs diff {mad}");
        }
    }

    #[test]
    fn k1_above_k2_over_five_is_rejected() {
        let spec = CorpusSpec { k1: 3, ..small_spec() };
        assert!(matches!(gen_synthetic_corpus(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn pixels_in_range_and_meta_set() {
        let data = gen_synthetic_corpus(&small_spec(), 1).unwrap();
        for split in Split::ALL {
            for (path, img) in data.split(split).iter().flatten() {
                assert!(img.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
                let s = img.meta.severity.unwrap();
                assert!((img.meta.score.unwrap() - (1.0 - s)).abs() < 1e-12);
                assert!(path.ends_with(".pgm"));
            }
        }
        let pristine = data.pool[0].iter().filter(|(_, i)| i.meta.severity == Some(0.0)).count();
        assert_eq!(pristine, 4); // 40 % of 6 degraded, rounded
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_synthetic_corpus(&small_spec(), 2).unwrap();
        write_corpus(&data, dir.path()).unwrap();
        let back = read_corpus(dir.path(), 2).unwrap();
        assert_eq!(back.planes, data.planes);
        assert_eq!(back.train[1].len(), 10);
        let (p, orig) = &data.query[1][2];
        let loaded = back.find(p).unwrap();
        assert_eq!(loaded.meta.severity, orig.meta.severity);
        assert!(loaded.pixels().iter().zip(orig.pixels()).all(|(a, b)| (a - b).abs() <= 1.0 / 255.0));
    }
}
