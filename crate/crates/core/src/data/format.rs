//! Binary sample container.
//!
//! Little-endian layout:
//!
//! | bytes        | content                         |
//! |--------------|---------------------------------|
//! | 4            | magic `BSEG`                    |
//! | 4            | version (`u32`, 1)              |
//! | 4 + 4        | height, width (`u32`)           |
//! | 4·H·W        | image, `f32`, row-major         |
//! | H·W          | mask, `u8` in {0, 1}            |
//!
//! A dataset is a directory of such files plus `manifest.txt` listing the
//! file names, one per line.

use std::fs;
use std::path::Path;

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BSEG";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";
/// Largest accepted height or width.
pub const MAX_SIDE: u32 = 16_384;

const HEADER_LEN: usize = 16;

pub fn encode_sample(sample: &Sample) -> Result<Vec<u8>> {
    sample.validate()?;
    let (h, w) = (sample.height(), sample.width());
    let mut out = Vec::with_capacity(HEADER_LEN + 5 * h * w);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in sample.image.data() {
        let f = v as f32;
        if f as f64 != v {
            return Err(Error::invalid("save_sample", format!("image value {v} is not representable as f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend(sample.mask.data().iter().map(|&v| v as u8));
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

/// Parse a complete sample file. Never panics on malformed input.
pub fn decode_sample(bytes: &[u8]) -> Result<Sample> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected BSEG".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!("header needs {HEADER_LEN} bytes, got {}", bytes.len())));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported sample version {version}")));
    }
    let (h, w) = (read_u32(bytes, 8), read_u32(bytes, 12));
    if h == 0 || w == 0 || h > MAX_SIDE || w > MAX_SIDE {
        return Err(Error::Format(format!("dimensions {h}x{w} outside 1..={MAX_SIDE}")));
    }
    let pixels = (h as usize)
        .checked_mul(w as usize)
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let expected = pixels
        .checked_mul(5)
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    if bytes.len() < expected {
        return Err(Error::Truncated(format!("payload needs {expected} bytes, got {}", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let img_bytes = &bytes[HEADER_LEN..HEADER_LEN + 4 * pixels];
    let mut image = Vec::with_capacity(pixels);
    for chunk in img_bytes.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Format(format!("image value {v} outside [0, 1]")));
        }
        image.push(v);
    }
    let mut mask = Vec::with_capacity(pixels);
    for &b in &bytes[HEADER_LEN + 4 * pixels..] {
        if b > 1 {
            return Err(Error::Format(format!("mask byte {b} is not 0 or 1")));
        }
        mask.push(b as f64);
    }
    let shape = vec![1, h as usize, w as usize];
    Ok(Sample { image: Tensor::new(shape.clone(), image)?, mask: Tensor::new(shape, mask)? })
}

pub fn save_sample(path: impl AsRef<Path>, sample: &Sample) -> Result<()> {
    let bytes = encode_sample(sample)?;
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_sample(path: impl AsRef<Path>) -> Result<Sample> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_sample(&bytes)
}

/// Write `samples` as `sample_00000.bseg`, ... plus the manifest.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:05}.bseg");
        save_sample(dir.join(&name), s)?;
        names.push(name);
    }
    let mut manifest = names.join("\n");
    manifest.push('\n');
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(names)
}

/// Read every sample named in the directory's manifest, in manifest order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<(String, Sample)>> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        if name.contains('/') || name.contains('\\') || name == ".." {
            return Err(Error::Format(format!("manifest entry {name:?} is not a plain file name")));
        }
        out.push((name.to_string(), load_sample(dir.join(name))?));
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{} lists no samples", mpath.display())));
    }
    Ok(out)
}
