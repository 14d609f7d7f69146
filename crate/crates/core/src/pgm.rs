//! 8-bit grayscale PGM images. Writes binary `P5`; reads `P5` and plain `P2`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || width.checked_mul(height) != Some(pixels.len()) {
            return Err(Error::invalid("pgm", format!("{width}x{height} image with {} pixels", pixels.len())));
        }
        Ok(GrayImage { width, height, pixels })
    }

    /// Linear map of values in [0, 1] to 0..=255, `round(255 * v)`. Values
    /// outside the range are clamped; NaN is rejected.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { context: "image values".into() });
        }
        let pixels = values.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect();
        Self::new(width, height, pixels)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parse a P5 or P2 image with maxval <= 255. Never panics.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = token(bytes, &mut pos)?;
        let ascii = match magic {
            b"P5" => false,
            b"P2" => true,
            _ => return Err(Error::Format("not a P5/P2 PGM".into())),
        };
        let width = header_number(bytes, &mut pos, "width")?;
        let height = header_number(bytes, &mut pos, "height")?;
        let maxval = header_number(bytes, &mut pos, "maxval")?;
        if width == 0 || height == 0 {
            return Err(Error::Format("empty image".into()));
        }
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("unsupported maxval {maxval}")));
        }
        let n = width
            .checked_mul(height)
            .filter(|&n| n <= 1 << 30)
            .ok_or_else(|| Error::Format(format!("{width}x{height} is too large")))?;
        let pixels = if ascii {
            let mut px = Vec::with_capacity(n.min(1 << 20));
            for i in 0..n {
                let tok = token(bytes, &mut pos).map_err(|_| Error::Truncated(format!("pixel {i} of {n}")))?;
                let v = parse_number(tok).filter(|&v| v <= maxval).ok_or_else(|| {
                    Error::Format(format!("pixel {i} is not a number <= {maxval}"))
                })?;
                px.push(v as u8);
            }
            skip_space(bytes, &mut pos);
            if pos != bytes.len() {
                return Err(Error::Format("trailing data after pixels".into()));
            }
            px
        } else {
            // exactly one whitespace byte separates the header from the raster
            if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
                return Err(Error::Truncated("raster".into()));
            }
            let raster = &bytes[pos + 1..];
            if raster.len() < n {
                return Err(Error::Truncated(format!("raster has {} of {n} bytes", raster.len())));
            }
            if raster.len() > n {
                return Err(Error::Format(format!("{} trailing bytes", raster.len() - n)));
            }
            if let Some(v) = raster.iter().find(|&&v| v as usize > maxval) {
                return Err(Error::Format(format!("pixel value {v} exceeds maxval {maxval}")));
            }
            raster.to_vec()
        };
        Self::new(width, height, pixels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.encode()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::decode(&bytes)
    }
}

fn skip_space(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => *pos += 1,
            _ => return,
        }
    }
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    skip_space(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Truncated("PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_number(tok: &[u8]) -> Option<usize> {
    if tok.is_empty() || tok.len() > 9 || !tok.iter().all(u8::is_ascii_digit) {
        return None;
    }
    std::str::from_utf8(tok).ok()?.parse().ok()
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = token(bytes, pos)?;
    parse_number(tok).ok_or_else(|| Error::Format(format!("PGM {what} is not a number")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_encoding_is_round_255() {
        let img = GrayImage::from_unit(4, 1, &[0.0, 0.5, 1.0 / 255.0 * 0.49, 1.0]).unwrap();
        // 127.5 rounds half away from zero
        assert_eq!(img.pixels, [0, 128, 0, 255]);
        assert!(GrayImage::from_unit(1, 1, &[f64::NAN]).is_err());
    }

    #[test]
    fn p5_bytes_and_round_trip() {
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let b = img.encode();
        assert_eq!(&b[..11], b"P5\n3 2\n255\n");
        assert_eq!(GrayImage::decode(&b).unwrap(), img);
    }

    #[test]
    fn plain_variant_with_comments() {
        let text = b"P2\n# made by hand\n2 2\n# max\n200\n0 10\n 200 7\n";
        let img = GrayImage::decode(text).unwrap();
        assert_eq!(img.pixels, [0, 10, 200, 7]);
    }

    #[test]
    fn malformed() {
        assert!(GrayImage::decode(b"").is_err());
        assert!(GrayImage::decode(b"P6\n1 1\n255\n\0").is_err());
        assert!(matches!(GrayImage::decode(b"P5\n2 2\n255\n\0\0\0"), Err(Error::Truncated(_))));
        assert!(GrayImage::decode(b"P5\n1 1\n255\n\0\0").is_err());
        assert!(GrayImage::decode(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(GrayImage::decode(b"P5\n99999999 99999999\n255\n").is_err());
        assert!(GrayImage::decode(b"P2\n1 1\n100\n101\n").is_err());
        assert!(GrayImage::decode(b"P5\n1 1\n100\n\xff").is_err());
    }
}
