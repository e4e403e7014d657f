//! Registration and orthogonality objectives.
//!
//! Divisions are guarded as `x / max(d, EPS)` so that self-pairs and
//! affine-intensity copies hit their ideal values exactly whenever the
//! denominator is meaningful.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Reduction, Tensor, Var};

pub const EPS: f64 = 1e-6;

fn check_pair(a: &Tensor, b: &Tensor, what: &str) -> Result<(usize, usize)> {
    if a.shape() != b.shape() || a.ndim() != 3 {
        return Err(Error::dimension(format!("{what} needs matching C×H×W features, got {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok((a.shape()[0], a.shape()[1] * a.shape()[2]))
}

/// Mean over positions of the cosine between channel vectors.
pub fn cosine_mean<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (av, bv) = (a.value(), b.value());
    let (c, n) = check_pair(&av, &bv, "cosine similarity")?;
    let (ad, bd) = (av.data(), bv.data());
    let mut na = vec![0.0; n];
    let mut nb = vec![0.0; n];
    let mut dot = vec![0.0; n];
    for ch in 0..c {
        for p in 0..n {
            let (x, y) = (ad[ch * n + p], bd[ch * n + p]);
            na[p] += x * x;
            nb[p] += y * y;
            dot[p] += x * y;
        }
    }
    let na: Vec<f64> = na.into_iter().map(f64::sqrt).collect();
    let nb: Vec<f64> = nb.into_iter().map(f64::sqrt).collect();
    let total: f64 = (0..n).map(|p| dot[p] / (na[p].max(EPS) * nb[p].max(EPS))).sum();
    let value = Tensor::scalar(total / n as f64);
    let (av, bv) = (av.clone(), bv.clone());
    Ok(a.tape().op(value, &[a, b], move |g| {
        let s = g.item() / n as f64;
        let (ad, bd) = (av.data(), bv.data());
        let mut ga = vec![0.0; ad.len()];
        let mut gb = vec![0.0; bd.len()];
        for p in 0..n {
            let (da, db) = (na[p].max(EPS), nb[p].max(EPS));
            let cos = dot[p] / (da * db);
            // d|a|/da = a/|a| only while the guard is inactive
            let ka = if na[p] > EPS { cos / (na[p] * na[p]) } else { 0.0 };
            let kb = if nb[p] > EPS { cos / (nb[p] * nb[p]) } else { 0.0 };
            for ch in 0..c {
                let i = ch * n + p;
                ga[i] = s * (bd[i] / (da * db) - ka * ad[i]);
                gb[i] = s * (ad[i] / (da * db) - kb * bd[i]);
            }
        }
        vec![Some(Tensor::new(av.shape().to_vec(), ga).expect("shape")), Some(Tensor::new(bv.shape().to_vec(), gb).expect("shape"))]
    }))
}

/// Mean over channels of the global normalised cross-correlation over the
/// spatial domain (population statistics).
pub fn ncc_mean<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (av, bv) = (a.value(), b.value());
    let (c, n) = check_pair(&av, &bv, "NCC")?;
    let nf = n as f64;
    struct Chan {
        ma: f64,
        mb: f64,
        sa: f64,
        sb: f64,
        cov: f64,
    }
    let stats: Vec<Chan> = (0..c)
        .map(|ch| {
            let xa = &av.data()[ch * n..(ch + 1) * n];
            let xb = &bv.data()[ch * n..(ch + 1) * n];
            let ma = xa.iter().sum::<f64>() / nf;
            let mb = xb.iter().sum::<f64>() / nf;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for (x, y) in xa.iter().zip(xb) {
                va += (x - ma) * (x - ma);
                vb += (y - mb) * (y - mb);
                cov += (x - ma) * (y - mb);
            }
            Chan { ma, mb, sa: (va / nf).sqrt(), sb: (vb / nf).sqrt(), cov: cov / nf }
        })
        .collect();
    let total: f64 = stats.iter().map(|s| s.cov / (s.sa * s.sb).max(EPS)).sum();
    let value = Tensor::scalar(total / c as f64);
    let (av, bv) = (av.clone(), bv.clone());
    Ok(a.tape().op(value, &[a, b], move |g| {
        let scale = g.item() / c as f64;
        let (ad, bd) = (av.data(), bv.data());
        let mut ga = vec![0.0; ad.len()];
        let mut gb = vec![0.0; bd.len()];
        for (ch, s) in stats.iter().enumerate() {
            let d = s.sa * s.sb;
            let guarded = d <= EPS;
            let den = d.max(EPS);
            for p in 0..n {
                let i = ch * n + p;
                let (xa, xb) = (ad[i] - s.ma, bd[i] - s.mb);
                let mut da = xb / (nf * den);
                let mut db = xa / (nf * den);
                if !guarded {
                    da -= s.cov / (den * den) * s.sb * xa / (nf * s.sa);
                    db -= s.cov / (den * den) * s.sa * xb / (nf * s.sb);
                }
                ga[i] = scale * da;
                gb[i] = scale * db;
            }
        }
        vec![Some(Tensor::new(av.shape().to_vec(), ga).expect("shape")), Some(Tensor::new(bv.shape().to_vec(), gb).expect("shape"))]
    }))
}

/// `‖A − I‖_F²` of the linear part of a 2×3 `θ`.
pub fn jacobian_energy<'t>(theta: Var<'t>) -> Result<Var<'t>> {
    let t = theta.value();
    if t.shape() != [2, 3] {
        return Err(Error::dimension(format!("theta must be 2×3, got {:?}", t.shape())));
    }
    let d = t.data();
    let j = [d[0] - 1.0, d[1], d[3], d[4] - 1.0];
    let value = Tensor::scalar(j.iter().map(|x| x * x).sum());
    Ok(theta.tape().op(value, &[theta], move |g| {
        let s = 2.0 * g.item();
        vec![Some(Tensor::new([2, 3], vec![s * j[0], s * j[1], 0.0, s * j[2], s * j[3], 0.0]).expect("2×3"))]
    }))
}

fn sum_levels<'t>(terms: Vec<Var<'t>>) -> Result<Var<'t>> {
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| Error::contract("no levels"))?;
    it.try_fold(first, |acc, t| acc.add(t))
}

fn check_levels(a: &[Var<'_>], b: &[Var<'_>]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dimension(format!("level count mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `−Σ_l mean_p cos(a_l(p), b_l(p))`.
pub fn loss_sim<'t>(a: &[Var<'t>], b: &[Var<'t>]) -> Result<Var<'t>> {
    check_levels(a, b)?;
    Ok(sum_levels(a.iter().zip(b).map(|(x, y)| cosine_mean(*x, *y)).collect::<Result<_>>()?)?.neg())
}

/// `−Σ_l mean_c NCC(a_l[c], b_l[c])`.
pub fn loss_ncc<'t>(a: &[Var<'t>], b: &[Var<'t>]) -> Result<Var<'t>> {
    check_levels(a, b)?;
    Ok(sum_levels(a.iter().zip(b).map(|(x, y)| ncc_mean(*x, *y)).collect::<Result<_>>()?)?.neg())
}

/// `Σ_l ‖A_l − I‖_F²`, the mean Jacobian energy of each (affine) level.
pub fn loss_smooth<'t>(thetas: &[Var<'t>]) -> Result<Var<'t>> {
    sum_levels(thetas.iter().map(|t| jacobian_energy(*t)).collect::<Result<_>>()?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthVariant {
    /// `‖A_c A_c'ᵀ‖₁`.
    #[default]
    L1A,
    /// `‖A_c A_c'ᵀ‖_F`.
    FroA,
    /// `‖A_c A_c'ᵀ‖₁ + ‖B_cᵀ B_c'‖₁`.
    L1Ab,
    /// `‖A_c A_c'ᵀ‖_F + ‖B_cᵀ B_c'‖_F`.
    FroAb,
}

impl OrthVariant {
    pub const ALL: [OrthVariant; 4] = [OrthVariant::L1A, OrthVariant::FroA, OrthVariant::L1Ab, OrthVariant::FroAb];

    pub fn name(self) -> &'static str {
        match self {
            OrthVariant::L1A => "l1_a",
            OrthVariant::FroA => "fro_a",
            OrthVariant::L1Ab => "l1_ab",
            OrthVariant::FroAb => "fro_ab",
        }
    }

    fn norm(self) -> Reduction {
        match self {
            OrthVariant::L1A | OrthVariant::L1Ab => Reduction::L1,
            OrthVariant::FroA | OrthVariant::FroAb => Reduction::L2,
        }
    }

    fn uses_b(self) -> bool {
        matches!(self, OrthVariant::L1Ab | OrthVariant::FroAb)
    }
}

impl fmt::Display for OrthVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OrthVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::config(format!("unknown orthogonality variant `{s}`")))
    }
}

/// Expert matrices of one plane at one level, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct ExpertPair<'t> {
    pub a: Var<'t>,
    pub b: Var<'t>,
}

/// Orthogonality penalty for one level:
/// `1/(|C|(|C|−1)) Σ_{c≠c'} N(A_c A_c'ᵀ)` (plus the `B` term for the `_ab`
/// variants). Zero for a single plane.
pub fn loss_orth_level<'t>(experts: &[ExpertPair<'t>], variant: OrthVariant) -> Result<Option<Var<'t>>> {
    let n = experts.len();
    if n < 2 {
        return Ok(None);
    }
    let (r, d) = (experts[0].a.shape(), experts[0].b.shape());
    if experts.iter().any(|e| e.a.shape() != r || e.b.shape() != d) {
        return Err(Error::config("orthogonality loss needs experts of one rank and width"));
    }
    let mut terms = Vec::with_capacity(n * (n - 1));
    for (i, ei) in experts.iter().enumerate() {
        for (j, ej) in experts.iter().enumerate() {
            if i == j {
                continue;
            }
            let mut t = ei.a.matmul(ej.a.transpose()?)?.reduce(variant.norm())?;
            if variant.uses_b() {
                t = t.add(ei.b.transpose()?.matmul(ej.b)?.reduce(variant.norm())?)?;
            }
            terms.push(t);
        }
    }
    Ok(Some(sum_levels(terms)?.scale(1.0 / (n * (n - 1)) as f64)))
}

/// Level-averaged orthogonality penalty; `None` when no level has two or
/// more planes.
pub fn loss_orth<'t>(levels: &[Vec<ExpertPair<'t>>], variant: OrthVariant) -> Result<Option<Var<'t>>> {
    let per_level: Vec<Var<'t>> =
        levels.iter().map(|l| loss_orth_level(l, variant)).collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    if per_level.is_empty() {
        return Ok(None);
    }
    let k = per_level.len() as f64;
    Ok(Some(sum_levels(per_level)?.scale(1.0 / k)))
}

/// Plain-valued loss components of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub sim: f64,
    pub ncc: f64,
    pub smooth: f64,
    pub orth: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.sim, self.ncc, self.smooth, self.orth, self.reg, self.total].iter().all(|v| v.is_finite())
    }
}

/// `reg = sim + ncc + smooth`, `total = reg + λ·orth`.
pub fn total_loss(sim: f64, ncc: f64, smooth: f64, orth: f64, lambda: f64) -> LossBundle {
    let reg = sim + ncc + smooth;
    LossBundle { sim, ncc, smooth, orth, reg, total: reg + lambda * orth, lambda }
}
