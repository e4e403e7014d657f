use super::Image;
use crate::error::Result;

/// Pixel-space affine map `p ↦ M·[x, y, 1]ᵀ`. Pixel centres sit at integer
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] };

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Affine2) -> Affine2 {
        let (a, b) = (&self.m, &other.m);
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + if c == 2 { a[r][2] } else { 0.0 };
            }
        }
        Affine2 { m }
    }

    pub fn inverse(&self) -> Affine2 {
        let m = &self.m;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        let (tx, ty) = (m[0][2], m[1][2]);
        Affine2 { m: [[a, b, -(a * tx + b * ty)], [c, d, -(c * tx + d * ty)]] }
    }

    /// Rotation by `angle` (radians), isotropic `scale`, then shift by
    /// `(tx, ty)` pixels, all about `(cx, cy)`.
    pub fn about(cx: f64, cy: f64, angle: f64, scale: f64, tx: f64, ty: f64) -> Affine2 {
        let (s, c) = angle.sin_cos();
        let (a, b, cc, d) = (scale * c, -scale * s, scale * s, scale * c);
        Affine2 { m: [[a, b, cx + tx - (a * cx + b * cy)], [cc, d, cy + ty - (cc * cx + d * cy)]] }
    }
}

/// Bilinear sample with zero fill outside the raster. Coordinates within
/// 1e-9 of a pixel centre snap onto it so identity maps are exact.
pub fn sample_pixel(pixels: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    let (x, y) = (snap(x), snap(y));
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= width as i64 || yi >= height as i64 {
            0.0
        } else {
            pixels[yi as usize * width + xi as usize]
        }
    };
    let mut v = (1.0 - fx) * (1.0 - fy) * at(x0, y0);
    if fx != 0.0 {
        v += fx * (1.0 - fy) * at(x0 + 1, y0);
    }
    if fy != 0.0 {
        v += (1.0 - fx) * fy * at(x0, y0 + 1);
        if fx != 0.0 {
            v += fx * fy * at(x0 + 1, y0 + 1);
        }
    }
    v
}

/// Resamples `img` by backward mapping: output pixel `(x, y)` reads the
/// source at `source_of(x, y)`.
pub fn warp_backward(img: &Image, source_of: impl Fn(f64, f64) -> (f64, f64)) -> Result<Image> {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source_of(x as f64, y as f64);
            out.push(sample_pixel(img.pixels(), w, h, sx, sy));
        }
    }
    img.with_pixels(out)
}

/// Applies the forward map `forward` (source → destination).
pub fn warp_affine(img: &Image, forward: &Affine2) -> Result<Image> {
    let inv = forward.inverse();
    warp_backward(img, |x, y| inv.apply(x, y))
}
