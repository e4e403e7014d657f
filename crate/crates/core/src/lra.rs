//! Latent registration aligner: per-level localisation networks, affine
//! grids and bilinear feature sampling, cascaded over the three levels.
//!
//! Coordinates are normalised so that corner pixel centres sit at exactly
//! ±1, which makes the identity transform an exact pass-through.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Conv, ConvVars, LEVELS};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, TensorArchive, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformMode {
    Affine,
    Translation,
    Rotation,
    Scale,
    Shear,
    RotationScale,
    TranslationScale,
    RotationTranslation,
}

impl TransformMode {
    pub const ALL: [TransformMode; 8] = [
        TransformMode::Affine,
        TransformMode::Translation,
        TransformMode::Rotation,
        TransformMode::Scale,
        TransformMode::Shear,
        TransformMode::RotationScale,
        TransformMode::TranslationScale,
        TransformMode::RotationTranslation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformMode::Affine => "affine",
            TransformMode::Translation => "translation",
            TransformMode::Rotation => "rotation",
            TransformMode::Scale => "scale",
            TransformMode::Shear => "shear",
            TransformMode::RotationScale => "rotation_scale",
            TransformMode::TranslationScale => "translation_scale",
            TransformMode::RotationTranslation => "rotation_translation",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&m| m == self).expect("listed")
    }

    /// Parameter layouts:
    /// affine `(a, b, tx, c, d, ty)`, translation `(tx, ty)`, rotation `(θ)`,
    /// scale `(sx, sy)`, shear `(λx, λy)`, rotation_scale `(θ, sx, sy)`,
    /// translation_scale `(sx, sy, tx, ty)`, rotation_translation `(θ, tx, ty)`.
    pub fn param_count(self) -> usize {
        match self {
            TransformMode::Affine => 6,
            TransformMode::Rotation => 1,
            TransformMode::TranslationScale => 4,
            TransformMode::RotationScale | TransformMode::RotationTranslation => 3,
            TransformMode::Translation | TransformMode::Scale | TransformMode::Shear => 2,
        }
    }

    /// Raw parameters that produce the identity matrix.
    pub fn identity_params(self) -> Vec<f64> {
        match self {
            TransformMode::Affine => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            TransformMode::Translation | TransformMode::Shear => vec![0.0, 0.0],
            TransformMode::Rotation => vec![0.0],
            TransformMode::Scale => vec![1.0, 1.0],
            TransformMode::RotationScale => vec![0.0, 1.0, 1.0],
            TransformMode::TranslationScale => vec![1.0, 1.0, 0.0, 0.0],
            TransformMode::RotationTranslation => vec![0.0, 0.0, 0.0],
        }
    }

    /// Row-major `θ` (6 values) and its Jacobian `6×P` at `p`.
    fn theta_and_jacobian(self, p: &[f64]) -> ([f64; 6], Vec<[f64; 6]>) {
        let rot = |t: f64| t.sin_cos();
        match self {
            TransformMode::Affine => {
                let jac = (0..6).map(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 })).collect();
                ([p[0], p[1], p[2], p[3], p[4], p[5]], jac)
            }
            TransformMode::Translation => {
                ([1.0, 0.0, p[0], 0.0, 1.0, p[1]], vec![[0.0, 0.0, 1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 0.0, 1.0]])
            }
            TransformMode::Rotation => {
                let (s, c) = rot(p[0]);
                ([c, -s, 0.0, s, c, 0.0], vec![[-s, -c, 0.0, c, -s, 0.0]])
            }
            TransformMode::Scale => {
                ([p[0], 0.0, 0.0, 0.0, p[1], 0.0], vec![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 1.0, 0.0]])
            }
            TransformMode::Shear => {
                ([1.0, p[0], 0.0, p[1], 1.0, 0.0], vec![[0.0, 1.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]])
            }
            TransformMode::RotationScale => {
                let (s, c) = rot(p[0]);
                let (sx, sy) = (p[1], p[2]);
                (
                    [sx * c, -s, 0.0, s, sy * c, 0.0],
                    vec![[-sx * s, -c, 0.0, c, -sy * s, 0.0], [c, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, c, 0.0]],
                )
            }
            TransformMode::TranslationScale => (
                [p[0], 0.0, p[2], 0.0, p[1], p[3]],
                vec![
                    [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                    [0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                    [0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
                    [0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
                ],
            ),
            TransformMode::RotationTranslation => {
                let (s, c) = rot(p[0]);
                ([c, -s, p[1], s, c, p[2]], vec![[-s, -c, 0.0, c, -s, 0.0], [0.0, 0.0, 1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 0.0, 1.0]])
            }
        }
    }
}

impl fmt::Display for TransformMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::config(format!("unknown transform mode `{s}`")))
    }
}

/// A 2×3 matrix `[[a11, a12, tx], [a21, a22, ty]]` with its generating mode
/// and raw parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineTransform {
    pub theta: [[f64; 3]; 2],
    pub mode: TransformMode,
    pub params: Vec<f64>,
}

impl AffineTransform {
    pub fn identity(mode: TransformMode) -> Self {
        build_affine(mode, &mode.identity_params()).expect("identity params fit their mode")
    }

    /// From a bare matrix (mode `affine`).
    pub fn from_theta(theta: [[f64; 3]; 2]) -> Self {
        let params = vec![theta[0][0], theta[0][1], theta[0][2], theta[1][0], theta[1][1], theta[1][2]];
        Self { theta, mode: TransformMode::Affine, params }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape() != [2, 3] {
            return Err(Error::dimension(format!("theta must be 2×3, got {:?}", t.shape())));
        }
        let d = t.data();
        Ok(Self::from_theta([[d[0], d[1], d[2]], [d[3], d[4], d[5]]]))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([2, 3], self.theta.iter().flatten().copied().collect()).expect("2×3")
    }

    /// Homogeneous product `self · other` (apply `other` first).
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let (a, b) = (&self.theta, &other.theta);
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + if c == 2 { a[r][2] } else { 0.0 };
            }
        }
        AffineTransform::from_theta(m)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let t = &self.theta;
        (t[0][0] * x + t[0][1] * y + t[0][2], t[1][0] * x + t[1][1] * y + t[1][2])
    }

    /// `‖A − I‖_F²` of the linear part, the (constant) Jacobian energy of
    /// the displacement field `ψ(p) = (A − I) p + t`.
    pub fn jacobian_energy(&self) -> f64 {
        let t = &self.theta;
        (t[0][0] - 1.0).powi(2) + t[0][1].powi(2) + t[1][0].powi(2) + (t[1][1] - 1.0).powi(2)
    }

    /// Distance to the identity over all six entries.
    pub fn distance_to_identity(&self) -> f64 {
        let t = &self.theta;
        (self.jacobian_energy() + t[0][2].powi(2) + t[1][2].powi(2)).sqrt()
    }
}

pub fn build_affine(mode: TransformMode, params: &[f64]) -> Result<AffineTransform> {
    if params.len() != mode.param_count() {
        return Err(Error::contract(format!("mode {mode} takes {} parameters, got {}", mode.param_count(), params.len())));
    }
    let (t, _) = mode.theta_and_jacobian(params);
    Ok(AffineTransform { theta: [[t[0], t[1], t[2]], [t[3], t[4], t[5]]], mode, params: params.to_vec() })
}

/// Differentiable `θ` (2×3) from a parameter vector of length `P`.
pub fn affine_from_params<'t>(mode: TransformMode, params: Var<'t>) -> Result<Var<'t>> {
    let p = params.value();
    if p.len() != mode.param_count() {
        return Err(Error::contract(format!("mode {mode} takes {} parameters, got {}", mode.param_count(), p.len())));
    }
    let (theta, jac) = mode.theta_and_jacobian(p.data());
    let value = Tensor::new([2, 3], theta.to_vec())?;
    let shape = p.shape().to_vec();
    Ok(params.tape().op(value, &[params], move |g| {
        let gd = g.data();
        let grad = jac.iter().map(|col| col.iter().zip(gd).map(|(j, g)| j * g).sum()).collect();
        vec![Some(Tensor::new(shape.clone(), grad).expect("param shape"))]
    }))
}

/// Normalised coordinate of index `i` on an axis of `n` samples.
fn norm_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Sampling grid `H×W×2` (x, y): `grid(p) = θ · [p_x, p_y, 1]ᵀ`.
pub fn affine_grid<'t>(theta: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let t = theta.value();
    if t.shape() != [2, 3] {
        return Err(Error::dimension(format!("theta must be 2×3, got {:?}", t.shape())));
    }
    if h == 0 || w == 0 {
        return Err(Error::dimension("grid needs positive size"));
    }
    let td = t.data();
    let mut grid = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        let py = norm_coord(i, h);
        for j in 0..w {
            let px = norm_coord(j, w);
            grid.push(td[0] * px + td[1] * py + td[2]);
            grid.push(td[3] * px + td[4] * py + td[5]);
        }
    }
    let value = Tensor::new([h, w, 2], grid)?;
    Ok(theta.tape().op(value, &[theta], move |g| {
        let gd = g.data();
        let mut gt = [0.0; 6];
        for i in 0..h {
            let py = norm_coord(i, h);
            for j in 0..w {
                let px = norm_coord(j, w);
                let k = (i * w + j) * 2;
                for r in 0..2 {
                    gt[3 * r] += gd[k + r] * px;
                    gt[3 * r + 1] += gd[k + r] * py;
                    gt[3 * r + 2] += gd[k + r];
                }
            }
        }
        vec![Some(Tensor::new([2, 3], gt.to_vec()).expect("2×3"))]
    }))
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Bilinear corners of one sample: pixel coordinate, base indices and
/// fractional offsets.
struct Tap {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
    /// d(pixel)/d(normalised) per axis.
    sx: f64,
    sy: f64,
}

impl Tap {
    fn new(gx: f64, gy: f64, h: usize, w: usize) -> Self {
        let (sx, sy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
        let (x, y) = (snap((gx + 1.0) * sx), snap((gy + 1.0) * sy));
        let (x0, y0) = (x.floor(), y.floor());
        Self { x0: x0 as isize, y0: y0 as isize, fx: x - x0, fy: y - y0, sx, sy }
    }
}

/// Bilinear sampling of `C×H×W` features at an `H'×W'×2` grid, zero
/// padding outside the raster. Differentiable in both inputs.
pub fn sample_bilinear<'t>(feat: Var<'t>, grid: Var<'t>) -> Result<Var<'t>> {
    let f = feat.value();
    let g = grid.value();
    if f.ndim() != 3 || g.ndim() != 3 || g.shape()[2] != 2 {
        return Err(Error::dimension(format!("sample_bilinear wants C×H×W and H'×W'×2, got {:?} and {:?}", f.shape(), g.shape())));
    }
    if !g.is_finite() {
        return Err(Error::domain("non-finite sampling grid"));
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let (ho, wo) = (g.shape()[0], g.shape()[1]);
    let at = move |fd: &[f64], ch: usize, y: isize, x: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            fd[(ch * h + y as usize) * w + x as usize]
        }
    };
    let fd = f.data();
    let gd = g.data();
    let mut out = vec![0.0; c * ho * wo];
    for p in 0..ho * wo {
        let t = Tap::new(gd[2 * p], gd[2 * p + 1], h, w);
        let weights = [(1.0 - t.fx) * (1.0 - t.fy), t.fx * (1.0 - t.fy), (1.0 - t.fx) * t.fy, t.fx * t.fy];
        let offs = [(0, 0), (1, 0), (0, 1), (1, 1)];
        for ch in 0..c {
            let mut v = 0.0;
            for (wt, (dx, dy)) in weights.iter().zip(offs) {
                if *wt != 0.0 {
                    v += wt * at(fd, ch, t.y0 + dy, t.x0 + dx);
                }
            }
            out[ch * ho * wo + p] = v;
        }
    }
    let value = Tensor::new([c, ho, wo], out)?;
    let (f, g) = (f.clone(), g.clone());
    Ok(feat.tape().op(value, &[feat, grid], move |go| {
        let (fd, gd, god) = (f.data(), g.data(), go.data());
        let mut gf = vec![0.0; fd.len()];
        let mut gg = vec![0.0; gd.len()];
        for p in 0..ho * wo {
            let t = Tap::new(gd[2 * p], gd[2 * p + 1], h, w);
            let corners = [(0isize, 0isize), (1, 0), (0, 1), (1, 1)];
            let weights = [(1.0 - t.fx) * (1.0 - t.fy), t.fx * (1.0 - t.fy), (1.0 - t.fx) * t.fy, t.fx * t.fy];
            let (mut dgx, mut dgy) = (0.0, 0.0);
            for ch in 0..c {
                let gout = god[ch * ho * wo + p];
                if gout == 0.0 {
                    continue;
                }
                let v = corners.map(|(dx, dy)| at(fd, ch, t.y0 + dy, t.x0 + dx));
                for (k, (dx, dy)) in corners.iter().enumerate() {
                    let (x, y) = (t.x0 + dx, t.y0 + dy);
                    if weights[k] != 0.0 && x >= 0 && y >= 0 && x < w as isize && y < h as isize {
                        gf[(ch * h + y as usize) * w + x as usize] += gout * weights[k];
                    }
                }
                dgx += gout * ((1.0 - t.fy) * (v[1] - v[0]) + t.fy * (v[3] - v[2]));
                dgy += gout * ((1.0 - t.fx) * (v[2] - v[0]) + t.fx * (v[3] - v[1]));
            }
            gg[2 * p] = dgx * t.sx;
            gg[2 * p + 1] = dgy * t.sy;
        }
        vec![Some(Tensor::new(f.shape().to_vec(), gf).expect("feat shape")), Some(Tensor::new(g.shape().to_vec(), gg).expect("grid shape"))]
    }))
}

/// Warps `feat` by `theta` onto its own spatial size.
pub fn warp<'t>(feat: Var<'t>, theta: Var<'t>) -> Result<Var<'t>> {
    let s = feat.shape();
    if s.len() != 3 {
        return Err(Error::dimension(format!("warp expects C×H×W features, got {s:?}")));
    }
    sample_bilinear(feat, affine_grid(theta, s[1], s[2])?)
}

/// Two stride-2 convolutions, global average pooling and a linear head
/// predicting parameter deltas from the identity. The head starts at zero,
/// so a fresh net outputs the identity transform.
#[derive(Clone, Debug, PartialEq)]
pub struct LocNet {
    pub conv1: Conv,
    pub conv2: Conv,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LocNetVars<'t> {
    pub conv1: ConvVars<'t>,
    pub conv2: ConvVars<'t>,
    pub head_w: Var<'t>,
    pub head_b: Var<'t>,
}

impl LocNet {
    pub fn new(in_channels: usize, hidden: usize, mode: TransformMode, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv::he(rng, hidden, in_channels, 3),
            conv2: Conv::he(rng, hidden, hidden, 3),
            head_w: Tensor::zeros([mode.param_count(), hidden]),
            head_b: Tensor::zeros([mode.param_count()]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.weight.shape()[1]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> LocNetVars<'t> {
        LocNetVars {
            conv1: self.conv1.bind(tape, trainable),
            conv2: self.conv2.bind(tape, trainable),
            head_w: tape.leaf(self.head_w.clone(), trainable),
            head_b: tape.leaf(self.head_b.clone(), trainable),
        }
    }

    pub fn params(&self) -> [&Tensor; 6] {
        [&self.conv1.weight, &self.conv1.bias, &self.conv2.weight, &self.conv2.bias, &self.head_w, &self.head_b]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 6] {
        [&mut self.conv1.weight, &mut self.conv1.bias, &mut self.conv2.weight, &mut self.conv2.bias, &mut self.head_w, &mut self.head_b]
    }
}

impl<'t> LocNetVars<'t> {
    pub fn vars(&self) -> [Var<'t>; 6] {
        [self.conv1.weight, self.conv1.bias, self.conv2.weight, self.conv2.bias, self.head_w, self.head_b]
    }

    /// `θ` for the concatenated sources `[a; b]`.
    pub fn forward(&self, mode: TransformMode, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let x = Var::concat(&[a, b])?;
        let h = self.conv1.apply(x, 2)?.relu();
        let h = self.conv2.apply(h, 2)?.relu();
        let pooled = h.global_avg_pool()?;
        let n = pooled.shape()[0];
        let delta = self.head_w.matmul(pooled.reshape([n, 1])?)?;
        let p = mode.param_count();
        let delta = delta.reshape([p])?.add(self.head_b)?;
        let base = a.tape().constant(Tensor::new([p], mode.identity_params())?);
        affine_from_params(mode, delta.add(base)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LraConfig {
    pub mode: TransformMode,
    /// Channels of both localisation convolutions.
    pub hidden: usize,
    /// Warp both streams with the predicted transform instead of only the
    /// moving (query) stream.
    pub warp_both: bool,
    pub seed: u64,
}

impl Default for LraConfig {
    fn default() -> Self {
        Self { mode: TransformMode::Affine, hidden: 16, warp_both: false, seed: 1 }
    }
}

/// Three localisation nets and the warp policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Aligner {
    pub nets: Vec<LocNet>,
    pub mode: TransformMode,
    pub warp_both: bool,
}

/// Output of [`cascade_align`]: aligned features and per-level thetas.
#[derive(Clone, Copy, Debug)]
pub struct Alignment<'t> {
    pub a: [Var<'t>; LEVELS],
    pub b: [Var<'t>; LEVELS],
    pub thetas: [Var<'t>; LEVELS],
}

impl Aligner {
    /// Level 1 sees `2·C_1` channels; level `l > 1` sees the pooled aligned
    /// features of level `l − 1`, i.e. `2·C_{l−1}` channels.
    pub fn new(channels: [usize; LEVELS], cfg: &LraConfig) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::config("lra.hidden must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let nets = (0..LEVELS).map(|l| LocNet::new(2 * channels[l.saturating_sub(1)], cfg.hidden, cfg.mode, &mut rng)).collect();
        Ok(Self { nets, mode: cfg.mode, warp_both: cfg.warp_both })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<LocNetVars<'t>> {
        self.nets.iter().map(|n| n.bind(tape, trainable)).collect()
    }

    pub fn save(&self, archive: &mut TensorArchive) {
        archive.insert_scalar("lra.mode", self.mode.index() as f64);
        archive.insert_scalar("lra.warp_both", if self.warp_both { 1.0 } else { 0.0 });
        for (l, net) in self.nets.iter().enumerate() {
            let p = format!("lra.l{}", l + 1);
            net.conv1.save(archive, &format!("{p}.conv1"));
            net.conv2.save(archive, &format!("{p}.conv2"));
            archive.insert(format!("{p}.head.w"), net.head_w.clone());
            archive.insert(format!("{p}.head.b"), net.head_b.clone());
        }
    }

    pub fn load(archive: &TensorArchive) -> Result<Self> {
        let idx = archive.get_scalar("lra.mode")?;
        let mode = *TransformMode::ALL
            .get(idx as usize)
            .filter(|_| idx >= 0.0 && idx.fract() == 0.0)
            .ok_or_else(|| Error::format(format!("invalid lra.mode index {idx}")))?;
        let warp_both = archive.get_scalar("lra.warp_both")? != 0.0;
        let mut nets = Vec::with_capacity(LEVELS);
        for l in 1..=LEVELS {
            let p = format!("lra.l{l}");
            let net = LocNet {
                conv1: Conv::load(archive, &format!("{p}.conv1"))?,
                conv2: Conv::load(archive, &format!("{p}.conv2"))?,
                head_w: archive.get(&format!("{p}.head.w"))?.clone(),
                head_b: archive.get(&format!("{p}.head.b"))?.clone(),
            };
            if net.head_b.shape() != [mode.param_count()] {
                return Err(Error::format(format!("{p}: head does not match mode {mode}")));
            }
            nets.push(net);
        }
        Ok(Self { nets, mode, warp_both })
    }
}

/// Cascaded alignment. Level-1 sources are the raw features; each level
/// predicts `Θ_l` from its concatenated sources and warps the moving
/// stream `b` (and `a` too when `warp_both`); the warped maps, average
/// pooled 2×, become the next level's sources.
pub fn cascade_align<'t>(
    nets: &[LocNetVars<'t>],
    mode: TransformMode,
    warp_both: bool,
    a: &[Var<'t>; LEVELS],
    b: &[Var<'t>; LEVELS],
) -> Result<Alignment<'t>> {
    if nets.len() != LEVELS {
        return Err(Error::contract(format!("cascade needs {LEVELS} localisation nets, got {}", nets.len())));
    }
    let (mut src_a, mut src_b) = (a[0], b[0]);
    let (mut out_a, mut out_b, mut thetas) = (Vec::new(), Vec::new(), Vec::new());
    for l in 0..LEVELS {
        let theta = nets[l].forward(mode, src_a, src_b)?;
        let tb = warp(b[l], theta)?;
        let ta = if warp_both { warp(a[l], theta)? } else { a[l] };
        if l + 1 < LEVELS {
            src_a = ta.avg_pool2()?;
            src_b = tb.avg_pool2()?;
        }
        out_a.push(ta);
        out_b.push(tb);
        thetas.push(theta);
    }
    Ok(Alignment { a: [out_a[0], out_a[1], out_a[2]], b: [out_b[0], out_b[1], out_b[2]], thetas: [thetas[0], thetas[1], thetas[2]] })
}
