//! Orthogonal knowledge subspaces: per-plane low-rank experts, a shared
//! general expert, activation-based basis selection, task vectors,
//! conflict masks and the projected update of the general expert.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{BackboneFeatures, LEVELS};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, TensorArchive};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OksConfig {
    /// Nominal rank; each level uses `min(r, d / 2)`.
    pub r: usize,
    /// Adapter scale numerator; `None` means `α = r`, i.e. unit scale.
    pub alpha: Option<f64>,
    /// Activation threshold for plane experts.
    pub epsilon: f64,
    /// Activation threshold for the general expert.
    pub gamma: f64,
    pub abs_activation: bool,
    /// Project with the row-normalised task vectors as given instead of an
    /// orthonormalised copy.
    pub literal_projection: bool,
    pub seed: u64,
}

impl Default for OksConfig {
    fn default() -> Self {
        Self { r: 16, alpha: None, epsilon: 0.1, gamma: 0.1, abs_activation: false, literal_projection: false, seed: 2 }
    }
}

impl OksConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::config("oks.r must be positive"));
        }
        if !self.epsilon.is_finite() || !self.gamma.is_finite() || self.alpha.is_some_and(|a| !a.is_finite()) {
            return Err(Error::config("oks thresholds and alpha must be finite"));
        }
        Ok(())
    }

    /// Rank used at a level with `d` channels.
    pub fn rank_for(&self, d: usize) -> Result<usize> {
        let r = self.r.min(d / 2);
        if r == 0 {
            return Err(Error::config(format!("{d} channels leave no room for a rank r <= d/2 expert")));
        }
        Ok(r)
    }

    /// `α / r` at a level of rank `r`.
    pub fn scale(&self, r: usize) -> f64 {
        self.alpha.map_or(1.0, |a| a / r as f64)
    }
}

/// A low-rank pair `A: r×d`, `B: d×r`; the expert is `E = B A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRank {
    pub a: Tensor,
    pub b: Tensor,
}

impl LowRank {
    /// `A` with `N(0, 1/d)` entries, `B` zero.
    pub fn init(r: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
        Self { a: Tensor::from_fn([r, d], |_| normal.sample(rng)), b: Tensor::zeros([d, r]) }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn dim(&self) -> usize {
        self.a.cols()
    }

    fn check(&self) -> Result<()> {
        let (r, d) = (self.a.rows(), self.a.cols());
        if self.a.ndim() != 2 || self.b.shape() != [d, r] || r * 2 > d {
            return Err(Error::config(format!("expert shapes A {:?} / B {:?} break r <= d/2", self.a.shape(), self.b.shape())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneExpert {
    pub plane: usize,
    pub level: usize,
    pub weights: LowRank,
    /// Values before the current training block.
    pub snapshot: Option<LowRank>,
}

impl PlaneExpert {
    pub fn take_snapshot(&mut self) {
        self.snapshot = Some(self.weights.clone());
    }

    /// `T = finetuned − snapshot` for both matrices.
    pub fn task_vector(&self) -> Result<TaskVector> {
        let pre = self
            .snapshot
            .as_ref()
            .ok_or_else(|| Error::state(format!("plane {} level {} has no snapshot to diff against", self.plane, self.level + 1)))?;
        Ok(TaskVector { a: self.weights.a.sub(&pre.a)?, b: self.weights.b.sub(&pre.b)? })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    pub a: Tensor,
    pub b: Tensor,
}

/// Binary (0/1) masks over the entries of `A` and `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConflictMask {
    pub a: Tensor,
    pub b: Tensor,
}

impl ConflictMask {
    pub fn zeros_like(t: &TaskVector) -> Self {
        Self { a: Tensor::zeros(t.a.shape().to_vec()), b: Tensor::zeros(t.b.shape().to_vec()) }
    }

    pub fn ones_fraction(&self) -> (f64, f64) {
        let f = |t: &Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
        (f(&self.a), f(&self.b))
    }
}

/// Linear-interpolation quantile of unsorted values (the default method of
/// most numerical libraries).
pub fn quantile_linear(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("quantile of an empty set"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::domain(format!("quantile level {q} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// 1 where an entry strictly exceeds the `(|C|−1)/|C|` quantile.
pub fn mask_matrix(t: &Tensor, n_planes: usize) -> Result<Tensor> {
    if n_planes < 2 {
        return Err(Error::config("conflict masks need at least two planes"));
    }
    let q = quantile_linear(t.data(), (n_planes - 1) as f64 / n_planes as f64)?;
    Ok(t.map(|x| if x > q { 1.0 } else { 0.0 }))
}

pub fn build_conflict_mask(t: &TaskVector, n_planes: usize) -> Result<ConflictMask> {
    Ok(ConflictMask { a: mask_matrix(&t.a, n_planes)?, b: mask_matrix(&t.b, n_planes)? })
}

/// Element-wise OR.
pub fn union_mask(masks: &[&ConflictMask]) -> Result<ConflictMask> {
    let first = masks.first().ok_or_else(|| Error::domain("union of no masks"))?;
    let mut out = (*first).clone();
    for m in &masks[1..] {
        out.a = out.a.zip_map(&m.a, f64::max)?;
        out.b = out.b.zip_map(&m.b, f64::max)?;
    }
    Ok(out)
}

/// Stacked unit-norm task vectors plus an orthonormal copy of their span.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeSpace {
    dim: usize,
    rows: Vec<Vec<f64>>,
    basis: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl KnowledgeSpace {
    pub fn new(dim: usize) -> Self {
        Self { dim, rows: Vec::new(), basis: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    /// Appends a row, normalised to unit length (a zero row stays zero and
    /// adds nothing to the span).
    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::dimension(format!("knowledge row of length {} in a {}-dim space", row.len(), self.dim)));
        }
        let norm = dot(row, row).sqrt();
        let unit: Vec<f64> = if norm > 0.0 { row.iter().map(|x| x / norm).collect() } else { row.to_vec() };
        // two Gram–Schmidt passes keep the basis orthonormal to machine precision
        let mut resid = unit.clone();
        for _ in 0..2 {
            for q in &self.basis {
                let c = dot(q, &resid);
                resid.iter_mut().zip(q).for_each(|(r, qi)| *r -= c * qi);
            }
        }
        let rn = dot(&resid, &resid).sqrt();
        if rn > 1e-10 {
            self.basis.push(resid.into_iter().map(|x| x / rn).collect());
        }
        self.rows.push(unit);
        Ok(())
    }

    /// `g − KᵀK g` onto the orthogonal complement of the stored rows, using
    /// the orthonormal basis, or the raw rows when `literal`.
    pub fn project(&self, g: &[f64], literal: bool) -> Result<Vec<f64>> {
        if g.len() != self.dim {
            return Err(Error::dimension(format!("gradient of length {} in a {}-dim space", g.len(), self.dim)));
        }
        let mut out = g.to_vec();
        if literal {
            let coeffs: Vec<f64> = self.rows.iter().map(|k| dot(k, g)).collect();
            for (k, c) in self.rows.iter().zip(coeffs) {
                out.iter_mut().zip(k).for_each(|(o, ki)| *o -= c * ki);
            }
        } else {
            for q in &self.basis {
                let c = dot(q, &out);
                out.iter_mut().zip(q).for_each(|(o, qi)| *o -= c * qi);
            }
        }
        Ok(out)
    }
}

/// Free-standing form of [`KnowledgeSpace::project`].
pub fn orthogonal_project(g: &[f64], k: &KnowledgeSpace, literal: bool) -> Result<Vec<f64>> {
    k.project(g, literal)
}

/// `W ← W − η (M ⊙ g_orth + (1 − M) ⊙ g)` for one matrix.
pub fn masked_update(w: &mut Tensor, g: &Tensor, g_orth: &Tensor, mask: Option<&Tensor>, lr: f64) -> Result<()> {
    w.expect_same_shape(g)?;
    w.expect_same_shape(g_orth)?;
    if let Some(m) = mask {
        w.expect_same_shape(m)?;
    }
    for i in 0..w.len() {
        let m = mask.map_or(0.0, |m| m.data()[i]);
        w.data_mut()[i] -= lr * (m * g_orth.data()[i] + (1.0 - m) * g.data()[i]);
    }
    Ok(())
}

/// Indices `k` with `z[k] > threshold` (or `|z[k]| > threshold`), plus `z`.
pub fn select_active_bases(a: &Tensor, x: &[f64], threshold: f64, abs: bool) -> Result<(Vec<usize>, Vec<f64>)> {
    if a.ndim() != 2 || a.cols() != x.len() {
        return Err(Error::dimension(format!("expert A {:?} cannot act on a {}-vector", a.shape(), x.len())));
    }
    let z: Vec<f64> = (0..a.rows()).map(|k| dot(a.row(k), x)).collect();
    let active = (0..z.len()).filter(|&k| activation(z[k], abs) > threshold).collect();
    Ok((active, z))
}

fn activation(z: f64, abs: bool) -> f64 {
    if abs {
        z.abs()
    } else {
        z
    }
}

/// `κ = min(|U|, ⌊r/|C|⌋)` most activated members of `U`, ties by lowest
/// index, returned in descending activation.
pub fn top_kappa(active: &[usize], z: &[f64], r: usize, n_planes: usize, abs: bool) -> Vec<usize> {
    let kappa = active.len().min(r / n_planes.max(1));
    let mut sorted = active.to_vec();
    sorted.sort_by(|&i, &j| activation(z[j], abs).total_cmp(&activation(z[i], abs)).then(i.cmp(&j)));
    sorted.truncate(kappa);
    sorted
}

/// Where a synergy basis came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisSource {
    Plane(usize),
    General,
}

/// Concatenated selected bases of one level: `A^E: k×d`, `B^E: d×k`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynergyExpert {
    pub a: Option<Tensor>,
    pub b: Option<Tensor>,
    pub scale: f64,
    pub selection: Vec<(BasisSource, usize)>,
}

impl SynergyExpert {
    /// `(α/r)·B^E A^E x` for a single `d`-vector; zero when nothing was
    /// selected.
    pub fn contribution(&self, x: &[f64]) -> Vec<f64> {
        match (&self.a, &self.b) {
            (Some(a), Some(b)) => {
                let ax: Vec<f64> = (0..a.rows()).map(|k| dot(a.row(k), x)).collect();
                (0..b.rows()).map(|i| self.scale * dot(b.row(i), &ax)).collect()
            }
            _ => vec![0.0; x.len()],
        }
    }
}

/// Stacks the chosen rows of each `A` (plane order, then general) and the
/// matching columns of each `B`.
pub fn assemble_synergy(parts: &[(BasisSource, &LowRank, &[usize])], scale: f64) -> Result<SynergyExpert> {
    let mut rows = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut selection = Vec::new();
    let mut d = None;
    for (src, lr, idx) in parts {
        if *d.get_or_insert(lr.dim()) != lr.dim() {
            return Err(Error::dimension("synergy parts disagree on d"));
        }
        for &k in *idx {
            if k >= lr.rank() {
                return Err(Error::dimension(format!("basis {k} out of rank {}", lr.rank())));
            }
            rows.extend_from_slice(lr.a.row(k));
            cols.push((0..lr.dim()).map(|i| lr.b.at2(i, k)).collect());
            selection.push((*src, k));
        }
    }
    if selection.is_empty() {
        return Ok(SynergyExpert { a: None, b: None, scale, selection });
    }
    let (n, d) = (selection.len(), d.expect("non-empty"));
    let a = Tensor::new([n, d], rows)?;
    let b = Tensor::from_fn([d, n], |i| cols[i % n][i / n]);
    Ok(SynergyExpert { a: Some(a), b: Some(b), scale, selection })
}

/// Experts and continual-learning state of one encoder level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelBank {
    pub planes: Vec<PlaneExpert>,
    pub general: LowRank,
    pub task_vectors: Vec<Option<TaskVector>>,
    pub masks: Vec<Option<ConflictMask>>,
    pub knowledge_a: KnowledgeSpace,
    pub knowledge_b: KnowledgeSpace,
}

impl LevelBank {
    pub fn rank(&self) -> usize {
        self.general.rank()
    }

    pub fn union_mask(&self) -> Result<Option<ConflictMask>> {
        let masks: Vec<&ConflictMask> = self.masks.iter().flatten().collect();
        if masks.is_empty() {
            return Ok(None);
        }
        union_mask(&masks).map(Some)
    }

    /// Masked, projected step on the general expert.
    pub fn update_general(&mut self, g_a: &Tensor, g_b: &Tensor, lr: f64, literal: bool) -> Result<()> {
        let union = self.union_mask()?;
        let ga_orth = Tensor::new(g_a.shape().to_vec(), self.knowledge_a.project(g_a.data(), literal)?)?;
        let gb_orth = Tensor::new(g_b.shape().to_vec(), self.knowledge_b.project(g_b.data(), literal)?)?;
        masked_update(&mut self.general.a, g_a, &ga_orth, union.as_ref().map(|m| &m.a), lr)?;
        masked_update(&mut self.general.b, g_b, &gb_orth, union.as_ref().map(|m| &m.b), lr)
    }
}

/// All levels' experts.
#[derive(Clone, Debug, PartialEq)]
pub struct OksBank {
    pub cfg: OksConfig,
    pub levels: Vec<LevelBank>,
}

impl OksBank {
    pub fn new(channels: [usize; LEVELS], n_planes: usize, cfg: &OksConfig) -> Result<Self> {
        cfg.validate()?;
        if n_planes == 0 {
            return Err(Error::config("at least one plane is required"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let levels = channels
            .iter()
            .enumerate()
            .map(|(level, &d)| {
                let r = cfg.rank_for(d)?;
                let planes = (0..n_planes)
                    .map(|plane| PlaneExpert { plane, level, weights: LowRank::init(r, d, &mut rng), snapshot: None })
                    .collect();
                Ok(LevelBank {
                    planes,
                    general: LowRank::init(r, d, &mut rng),
                    task_vectors: vec![None; n_planes],
                    masks: vec![None; n_planes],
                    knowledge_a: KnowledgeSpace::new(r * d),
                    knowledge_b: KnowledgeSpace::new(r * d),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), levels })
    }

    pub fn n_planes(&self) -> usize {
        self.levels[0].planes.len()
    }

    pub fn snapshot_plane(&mut self, plane: usize) -> Result<()> {
        self.check_plane(plane)?;
        for level in &mut self.levels {
            level.planes[plane].take_snapshot();
        }
        Ok(())
    }

    fn check_plane(&self, plane: usize) -> Result<()> {
        if plane >= self.n_planes() {
            return Err(Error::config(format!("plane {plane} out of {}", self.n_planes())));
        }
        Ok(())
    }

    /// Records `T_c`, `M_c` (with two or more planes) and the knowledge
    /// rows of plane `c` at every level.
    pub fn commit_plane(&mut self, plane: usize) -> Result<()> {
        self.check_plane(plane)?;
        let n = self.n_planes();
        for level in &mut self.levels {
            let tv = level.planes[plane].task_vector()?;
            if n >= 2 {
                level.masks[plane] = Some(build_conflict_mask(&tv, n)?);
            }
            level.knowledge_a.push(tv.a.data())?;
            level.knowledge_b.push(tv.b.data())?;
            level.task_vectors[plane] = Some(tv);
        }
        Ok(())
    }

    /// Synergy experts for an image with the given backbone features.
    pub fn synergy(&self, feats: &BackboneFeatures) -> Result<Vec<SynergyExpert>> {
        let n = self.n_planes();
        let abs = self.cfg.abs_activation;
        self.levels
            .iter()
            .enumerate()
            .map(|(l, bank)| {
                let x = feats.pooled(l);
                let r = bank.rank();
                let mut chosen = Vec::with_capacity(n + 1);
                for p in &bank.planes {
                    let (active, z) = select_active_bases(&p.weights.a, &x, self.cfg.epsilon, abs)?;
                    chosen.push((BasisSource::Plane(p.plane), &p.weights, top_kappa(&active, &z, r, n, abs)));
                }
                let (general, _) = select_active_bases(&bank.general.a, &x, self.cfg.gamma, abs)?;
                chosen.push((BasisSource::General, &bank.general, general));
                let parts: Vec<(BasisSource, &LowRank, &[usize])> = chosen.iter().map(|(s, w, idx)| (*s, *w, idx.as_slice())).collect();
                assemble_synergy(&parts, self.cfg.scale(r))
            })
            .collect()
    }

    /// Mean absolute entry of `A_c A_c'ᵀ` over ordered plane pairs and
    /// levels; 0 with a single plane.
    pub fn cross_gram_mean_abs(&self) -> Result<f64> {
        let n = self.n_planes();
        if n < 2 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for level in &self.levels {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let g = level.planes[i].weights.a.matmul(&level.planes[j].weights.a.transpose()?)?;
                        acc += g.reduce(crate::numerics::Reduction::L1)? / g.len() as f64;
                    }
                }
            }
            total += acc / (n * (n - 1)) as f64;
        }
        Ok(total / self.levels.len() as f64)
    }

    pub fn save(&self, archive: &mut TensorArchive) {
        let c = &self.cfg;
        archive.insert_scalar("oks.r", c.r as f64);
        archive.insert_scalar("oks.alpha", c.alpha.unwrap_or(-1.0));
        archive.insert_scalar("oks.epsilon", c.epsilon);
        archive.insert_scalar("oks.gamma", c.gamma);
        archive.insert_scalar("oks.abs_activation", c.abs_activation as u8 as f64);
        archive.insert_scalar("oks.literal_projection", c.literal_projection as u8 as f64);
        archive.insert_scalar("oks.planes", self.n_planes() as f64);
        for (l, level) in self.levels.iter().enumerate() {
            let pre = format!("oks.l{}", l + 1);
            for p in &level.planes {
                let pp = format!("{pre}.plane{}", p.plane);
                archive.insert(format!("{pp}.A"), p.weights.a.clone());
                archive.insert(format!("{pp}.B"), p.weights.b.clone());
                if let Some(t) = &level.task_vectors[p.plane] {
                    archive.insert(format!("{pp}.task.A"), t.a.clone());
                    archive.insert(format!("{pp}.task.B"), t.b.clone());
                }
                if let Some(m) = &level.masks[p.plane] {
                    archive.insert(format!("{pp}.mask.A"), m.a.clone());
                    archive.insert(format!("{pp}.mask.B"), m.b.clone());
                }
            }
            archive.insert(format!("{pre}.general.A"), level.general.a.clone());
            archive.insert(format!("{pre}.general.B"), level.general.b.clone());
        }
    }

    /// Knowledge rows are rebuilt from the stored task vectors in plane
    /// order, which is the training order.
    pub fn load(archive: &TensorArchive, seed: u64) -> Result<Self> {
        let alpha = archive.get_scalar("oks.alpha")?;
        let cfg = OksConfig {
            r: archive.get_scalar("oks.r")? as usize,
            alpha: if alpha < 0.0 { None } else { Some(alpha) },
            epsilon: archive.get_scalar("oks.epsilon")?,
            gamma: archive.get_scalar("oks.gamma")?,
            abs_activation: archive.get_scalar("oks.abs_activation")? != 0.0,
            literal_projection: archive.get_scalar("oks.literal_projection")? != 0.0,
            seed,
        };
        let n = archive.get_scalar("oks.planes")? as usize;
        let mut levels = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let pre = format!("oks.l{}", l + 1);
            let pair = |p: &str| -> Result<Option<(Tensor, Tensor)>> {
                if !archive.contains(&format!("{p}.A")) {
                    return Ok(None);
                }
                Ok(Some((archive.get(&format!("{p}.A"))?.clone(), archive.get(&format!("{p}.B"))?.clone())))
            };
            let (ga, gb) = pair(&format!("{pre}.general"))?.ok_or_else(|| Error::format(format!("missing {pre}.general")))?;
            let general = LowRank { a: ga, b: gb };
            general.check()?;
            let (r, d) = (general.rank(), general.dim());
            let mut bank = LevelBank {
                planes: Vec::with_capacity(n),
                general,
                task_vectors: vec![None; n],
                masks: vec![None; n],
                knowledge_a: KnowledgeSpace::new(r * d),
                knowledge_b: KnowledgeSpace::new(r * d),
            };
            for c in 0..n {
                let pp = format!("{pre}.plane{c}");
                let (a, b) = pair(&pp)?.ok_or_else(|| Error::format(format!("missing {pp}")))?;
                let weights = LowRank { a, b };
                if weights.a.shape() != bank.general.a.shape() || weights.b.shape() != bank.general.b.shape() {
                    return Err(Error::format(format!("{pp}: shape differs from the general expert")));
                }
                bank.planes.push(PlaneExpert { plane: c, level: l, weights, snapshot: None });
                if let Some((ta, tb)) = pair(&format!("{pp}.task"))? {
                    bank.knowledge_a.push(ta.data())?;
                    bank.knowledge_b.push(tb.data())?;
                    bank.task_vectors[c] = Some(TaskVector { a: ta, b: tb });
                }
                if let Some((ma, mb)) = pair(&format!("{pp}.mask"))? {
                    bank.masks[c] = Some(ConflictMask { a: ma, b: mb });
                }
            }
            levels.push(bank);
        }
        Ok(Self { cfg, levels })
    }
}
