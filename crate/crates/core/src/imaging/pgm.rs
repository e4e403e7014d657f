use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

/// Reads an 8-bit binary (P5) PGM with maxval 255.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    parse_pgm(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub(crate) fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::format(format!("unsupported PGM variant `{}`, only binary P5 is read", String::from_utf8_lossy(magic))));
    }
    let width = number(bytes, &mut pos)?;
    let height = number(bytes, &mut pos)?;
    let maxval = number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::format(format!("maxval {maxval} is not 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("missing separator after header"));
    }
    pos += 1;
    let n = width.checked_mul(height).ok_or_else(|| Error::format("image too large"))?;
    let raster = bytes.get(pos..pos + n).ok_or_else(|| Error::format(format!("truncated payload: need {n} bytes")))?;
    Image::new(width, height, raster.iter().map(|&b| b as f64 / 255.0).collect())
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("malformed header: unexpected end of file"));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(format!("malformed header field `{}`", String::from_utf8_lossy(t))))
}

pub(crate) fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn save_pgm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pgm(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_within_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Image::new(40, 33, (0..40 * 33).map(|_| rng.random::<f64>()).collect()).unwrap();
        let back = parse_pgm(&encode_pgm(&img)).unwrap();
        let worst = img.pixels().iter().zip(back.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0);
    }

    #[test]
    fn zero_image_round_trips_exactly() {
        let img = Image::filled(32, 32, 0.0).unwrap();
        assert_eq!(parse_pgm(&encode_pgm(&img)).unwrap(), img);
    }

    #[test]
    fn ascii_variant_is_rejected() {
        let p2 = b"P2\n32 32\n255\n0 0 0\n";
        assert!(matches!(parse_pgm(p2), Err(Error::Format(_))));
    }

    #[test]
    fn comments_and_truncation() {
        let mut bytes = b"P5\n# made by hand\n32 32\n255\n".to_vec();
        bytes.extend(vec![128u8; 32 * 32]);
        assert_eq!(parse_pgm(&bytes).unwrap().width(), 32);
        bytes.truncate(bytes.len() - 10);
        assert!(matches!(parse_pgm(&bytes), Err(Error::Format(_))));
        assert!(matches!(parse_pgm(b"P5\n32"), Err(Error::Format(_))));
    }
}
