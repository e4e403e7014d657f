use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::warp::{warp_affine, Affine2};
use super::Image;
use crate::error::Result;

/// Closed sampling ranges for the training augmentation. Defaults follow the
/// usual ultrasound recipe: ±20° rotation, ±20 % translation, 0.8–1.2×
/// scaling, mild contrast jitter and Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Contrast gain about the image mean.
    pub contrast: (f64, f64),
    pub rotation_deg: (f64, f64),
    /// Per-axis shift as a fraction of the side length.
    pub translation: (f64, f64),
    pub scale: (f64, f64),
    /// Standard deviation of additive Gaussian noise.
    pub noise_std: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { contrast: (0.8, 1.2), rotation_deg: (-20.0, 20.0), translation: (-0.2, 0.2), scale: (0.8, 1.2), noise_std: (0.0, 0.03) }
    }
}

impl AugmentConfig {
    /// Every range collapsed onto the identity.
    pub fn identity() -> Self {
        Self { contrast: (1.0, 1.0), rotation_deg: (0.0, 0.0), translation: (0.0, 0.0), scale: (1.0, 1.0), noise_std: (0.0, 0.0) }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Contrast, rotation, translation, scaling and noise, applied in that
/// order. The three geometric steps are composed into one resampling.
pub fn augment(img: &Image, cfg: &AugmentConfig, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = draw(&mut rng, cfg.contrast);
    let angle = draw(&mut rng, cfg.rotation_deg).to_radians();
    let tx = draw(&mut rng, cfg.translation) * img.width() as f64;
    let ty = draw(&mut rng, cfg.translation) * img.height() as f64;
    let scale = draw(&mut rng, cfg.scale);
    let sigma = draw(&mut rng, cfg.noise_std);

    let mut out = img.clone();
    if gain != 1.0 {
        let mean = img.mean();
        out = out.with_pixels(img.pixels().iter().map(|p| mean + gain * (p - mean)).collect())?;
    }
    let (cx, cy) = ((img.width() as f64 - 1.0) / 2.0, (img.height() as f64 - 1.0) / 2.0);
    let rotate = Affine2::about(cx, cy, angle, 1.0, 0.0, 0.0);
    let shift = Affine2::about(cx, cy, 0.0, 1.0, tx, ty);
    let zoom = Affine2::about(cx, cy, 0.0, scale, 0.0, 0.0);
    let forward = zoom.compose(&shift.compose(&rotate));
    if forward != Affine2::IDENTITY {
        out = warp_affine(&out, &forward)?;
    }
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        let noisy = out.pixels().iter().map(|p| p + noise.sample(&mut rng)).collect();
        out = out.with_pixels(noisy)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(n: usize) -> Image {
        Image::new(n, n, (0..n * n).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect()).unwrap()
    }

    #[test]
    fn identity_ranges_leave_image_unchanged() {
        let img = textured(40);
        assert_eq!(augment(&img, &AugmentConfig::identity(), 11).unwrap(), img);
    }

    #[test]
    fn same_seed_same_output() {
        let img = textured(48);
        let cfg = AugmentConfig::default();
        assert_eq!(augment(&img, &cfg, 5).unwrap(), augment(&img, &cfg, 5).unwrap());
        assert_ne!(augment(&img, &cfg, 5).unwrap(), augment(&img, &cfg, 6).unwrap());
    }

    #[test]
    fn output_stays_in_unit_range() {
        let img = textured(32);
        let cfg = AugmentConfig { contrast: (3.0, 3.0), noise_std: (0.5, 0.5), ..AugmentConfig::default() };
        let out = augment(&img, &cfg, 1).unwrap();
        assert!(out.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn rotation_moves_dot_to_rotated_position() {
        let n = 64usize;
        let c = (n as f64 - 1.0) / 2.0;
        let (dx, dy) = (c, c - 0.3 * n as f64);
        let px = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64, (i / n) as f64);
                if (x - dx).powi(2) + (y - dy).powi(2) <= 4.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let img = Image::new(n, n, px).unwrap();
        let cfg = AugmentConfig { rotation_deg: (20.0, 20.0), ..AugmentConfig::identity() };
        let out = augment(&img, &cfg, 0).unwrap();
        let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
        for (i, &p) in out.pixels().iter().enumerate() {
            sx += p * (i % n) as f64;
            sy += p * (i / n) as f64;
            m += p;
        }
        // closed form: rotate (0, -0.3 n) about the centre by +20°
        let (s, co) = 20f64.to_radians().sin_cos();
        let (ox, oy) = (0.0, -0.3 * n as f64);
        let expected = (c + co * ox - s * oy, c + s * ox + co * oy);
        assert!((sx / m - expected.0).abs() <= 1.0, "x {} vs {}", sx / m, expected.0);
        assert!((sy / m - expected.1).abs() <= 1.0, "y {} vs {}", sy / m, expected.1);
    }
}
