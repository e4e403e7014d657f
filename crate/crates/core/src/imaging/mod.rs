//! Images, PGM I/O, augmentation, graded deformations and the synthetic
//! speckled corpus.

mod augment;
mod corpus;
mod deform;
mod pgm;
mod warp;

pub use augment::{augment, AugmentConfig};
pub use corpus::{
    gen_synthetic_corpus, read_corpus, read_manifest, render_archetype, write_corpus, CorpusSpec, DatasetSplit, ManifestRow, Split,
};
pub use deform::{deform, mean_displacement, DeformKind, Deformation, NonrigidParams, RigidParams};
pub use pgm::{load_pgm, save_pgm};
pub use warp::{sample_pixel, warp_affine, warp_backward, Affine2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Smallest accepted side length.
pub const MIN_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlaneLabel {
    pub id: usize,
    pub name: String,
}

impl PlaneLabel {
    pub fn new(id: usize, name: impl Into<String>) -> Self {
        Self { id, name: name.into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageMeta {
    /// Deformation severity; 0 for pristine renders.
    pub severity: Option<f64>,
    /// Reference quality in `[0, 1]`.
    pub score: Option<f64>,
}

/// Grayscale image with pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    pub plane: Option<PlaneLabel>,
    pub meta: ImageMeta,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::domain(format!("image is {width}×{height}, both sides must be at least {MIN_SIDE}")));
        }
        if pixels.len() != width * height {
            return Err(Error::dimension(format!("{width}×{height} image needs {} pixels, got {}", width * height, pixels.len())));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::domain(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, pixels, plane: None, meta: ImageMeta::default() })
    }

    /// Builds an image from arbitrary values, clipping them into `[0, 1]`.
    pub fn from_clipped(width: usize, height: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Self::new(width, height, pixels)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn with_plane(mut self, plane: PlaneLabel) -> Self {
        self.plane = Some(plane);
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Replaces the pixels, keeping plane and meta.
    pub fn with_pixels(&self, pixels: Vec<f64>) -> Result<Self> {
        let mut out = Image::from_clipped(self.width, self.height, pixels)?;
        out.plane = self.plane.clone();
        out.meta = self.meta.clone();
        Ok(out)
    }

    /// `1×H×W` tensor view for the encoder.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.height, self.width], self.pixels.clone()).expect("consistent dims")
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

/// Peak signal-to-noise ratio in dB for unit-range images, over the pixels
/// where `mask` is true (all pixels when `None`).
pub fn psnr(a: &Image, b: &Image, mask: Option<&[bool]>) -> f64 {
    let (mut se, mut n) = (0.0, 0usize);
    for (i, (x, y)) in a.pixels.iter().zip(&b.pixels).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            se += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 || se == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (1.0 / (se / n as f64)).log10()
}

/// Derives an independent stream seed from a base seed and tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    splitmix64(s)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_or_out_of_range() {
        assert!(Image::new(16, 64, vec![0.0; 16 * 64]).is_err());
        assert!(Image::new(32, 32, vec![1.5; 32 * 32]).is_err());
        assert!(Image::new(32, 32, vec![0.5; 32 * 32]).is_ok());
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_eq!(derive_seed(7, &[3, 4]), derive_seed(7, &[3, 4]));
    }
}
