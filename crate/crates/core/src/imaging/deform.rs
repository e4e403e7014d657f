use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::warp::{warp_affine, warp_backward, Affine2};
use super::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeformKind {
    Rigid,
    Nonrigid,
}

impl DeformKind {
    pub const ALL: [DeformKind; 2] = [DeformKind::Rigid, DeformKind::Nonrigid];

    pub fn name(self) -> &'static str {
        match self {
            DeformKind::Rigid => "rigid",
            DeformKind::Nonrigid => "nonrigid",
        }
    }
}

impl fmt::Display for DeformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DeformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rigid" => Ok(DeformKind::Rigid),
            "nonrigid" | "non-rigid" => Ok(DeformKind::Nonrigid),
            _ => Err(Error::config(format!("unknown deformation kind `{s}`"))),
        }
    }
}

/// Similarity transform about the image centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidParams {
    pub angle: f64,
    pub scale: f64,
    /// Shift in pixels.
    pub tx: f64,
    pub ty: f64,
}

/// Sinusoidal displacement: `dx = A sin(2π·kx·y/H + φx)`,
/// `dy = A sin(2π·ky·x/W + φy)`, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NonrigidParams {
    pub amplitude: f64,
    pub periods_x: u32,
    pub periods_y: u32,
    pub phase_x: f64,
    pub phase_y: f64,
}

/// A sampled deformation, kept so it can be replayed or inverted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Deformation {
    Rigid { params: RigidParams, width: usize, height: usize },
    Nonrigid { params: NonrigidParams, width: usize, height: usize },
}

impl Deformation {
    /// Rigid: rotation of exactly 45°·s, scale 1 ± 0.4·s and a shift of
    /// 30 %·s of the width; signs and shift direction are random.
    /// Non-rigid: amplitude 0.25·s·W with 2–4 periods per axis.
    pub fn sample(kind: DeformKind, severity: f64, width: usize, height: usize, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&severity) {
            return Err(Error::domain(format!("severity {severity} outside [0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match kind {
            DeformKind::Rigid => {
                let rot_sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let scale_sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let dir = rng.random_range(0.0..TAU);
                let shift = 0.3 * severity * width as f64;
                Deformation::Rigid {
                    params: RigidParams {
                        angle: rot_sign * (45.0 * severity).to_radians(),
                        scale: 1.0 + scale_sign * 0.4 * severity,
                        tx: shift * dir.cos(),
                        ty: shift * dir.sin(),
                    },
                    width,
                    height,
                }
            }
            DeformKind::Nonrigid => Deformation::Nonrigid {
                params: NonrigidParams {
                    amplitude: 0.25 * severity * width as f64,
                    periods_x: rng.random_range(2..=4),
                    periods_y: rng.random_range(2..=4),
                    phase_x: rng.random_range(0.0..TAU),
                    phase_y: rng.random_range(0.0..TAU),
                },
                width,
                height,
            },
        })
    }

    /// Forward pixel map of a rigid deformation.
    pub fn rigid_map(&self) -> Option<Affine2> {
        match *self {
            Deformation::Rigid { params: p, width, height } => {
                Some(Affine2::about((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, p.angle, p.scale, p.tx, p.ty))
            }
            Deformation::Nonrigid { .. } => None,
        }
    }

    /// Where output pixel `(x, y)` reads from in the source.
    pub fn source_of(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            Deformation::Rigid { .. } => self.rigid_map().expect("rigid").inverse().apply(x, y),
            Deformation::Nonrigid { params: p, width, height } => {
                let dx = p.amplitude * (2.0 * PI * p.periods_x as f64 * y / height as f64 + p.phase_x).sin();
                let dy = p.amplitude * (2.0 * PI * p.periods_y as f64 * x / width as f64 + p.phase_y).sin();
                (x + dx, y + dy)
            }
        }
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        match self {
            Deformation::Rigid { .. } => warp_affine(img, &self.rigid_map().expect("rigid")),
            Deformation::Nonrigid { .. } => warp_backward(img, |x, y| self.source_of(x, y)),
        }
    }
}

/// Mean displacement magnitude of the backward map over the pixel grid.
pub fn mean_displacement(d: &Deformation) -> f64 {
    let (w, h) = match *d {
        Deformation::Rigid { width, height, .. } | Deformation::Nonrigid { width, height, .. } => (width, height),
    };
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = d.source_of(x as f64, y as f64);
            total += ((sx - x as f64).powi(2) + (sy - y as f64).powi(2)).sqrt();
        }
    }
    total / (w * h) as f64
}

/// Deforms `img` with the given kind and severity. Severity 0 returns the
/// input unchanged; the severity is recorded in the output's meta.
pub fn deform(img: &Image, kind: DeformKind, severity: f64, seed: u64) -> Result<Image> {
    let d = Deformation::sample(kind, severity, img.width(), img.height(), seed)?;
    let mut out = if severity == 0.0 { img.clone() } else { d.apply(img)? };
    out.meta.severity = Some(severity);
    out.meta.score = Some(1.0 - severity);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{psnr, render_archetype};
    use super::*;

    #[test]
    fn zero_severity_is_identity() {
        let img = render_archetype(0, 64, 3).unwrap();
        for kind in DeformKind::ALL {
            let out = deform(&img, kind, 0.0, 9).unwrap();
            assert_eq!(out.pixels(), img.pixels());
            assert_eq!(out.meta.severity, Some(0.0));
        }
    }

    #[test]
    fn severity_out_of_range() {
        let img = render_archetype(0, 32, 3).unwrap();
        assert!(matches!(deform(&img, DeformKind::Rigid, 1.2, 0), Err(Error::Domain(_))));
        assert!(matches!(deform(&img, DeformKind::Nonrigid, -0.1, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn rigid_is_invertible_where_content_survives() {
        let img = render_archetype(1, 64, 5).unwrap();
        let d = Deformation::sample(DeformKind::Rigid, 1.0, 64, 64, 21).unwrap();
        let fwd = d.rigid_map().unwrap();
        let warped = d.apply(&img).unwrap();
        let back = warp_affine(&warped, &fwd.inverse()).unwrap();
        // compare only pixels whose round trip stayed inside the frame
        let mask: Vec<bool> = (0..64 * 64)
            .map(|i| {
                let (x, y) = fwd.apply((i % 64) as f64, (i / 64) as f64);
                (0.0..=63.0).contains(&x) && (0.0..=63.0).contains(&y)
            })
            .collect();
        assert!(mask.iter().filter(|&&m| m).count() > 500);
        let p = psnr(&img, &back, Some(&mask));
        assert!(p >= 25.0, "psnr {p}");
    }

    #[test]
    fn displacement_grows_with_severity() {
        for kind in DeformKind::ALL {
            for seed in 0..8 {
                let mut last = -1.0;
                for step in 0..=10 {
                    let s = step as f64 / 10.0;
                    let d = Deformation::sample(kind, s, 48, 48, seed).unwrap();
                    let m = mean_displacement(&d);
                    assert!(m + 1e-9 >= last, "{kind} seed {seed}: {m} < {last} at s={s}");
                    last = m;
                }
            }
        }
        let lo = Deformation::sample(DeformKind::Nonrigid, 0.4, 64, 64, 2).unwrap();
        let hi = Deformation::sample(DeformKind::Nonrigid, 0.8, 64, 64, 2).unwrap();
        assert!(mean_displacement(&hi) > mean_displacement(&lo));
    }
}
