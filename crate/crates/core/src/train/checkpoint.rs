//! Binary checkpoints.
//!
//! Little-endian: magic `BCKP`, version `u32` = 1, epoch `u32`, tensor count
//! `u32`, then per tensor: name length `u16`, UTF-8 name, rank `u8`, one `u32`
//! per dimension, and the `f64` payload. Parameters come first in store order,
//! followed by `<param>.m` / `<param>.v` for every parameter and a rank-0
//! `adam.step`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::adam::AdamState;
use crate::error::{Error, Result};
use crate::nn::ParamLayout;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"BCKP";
pub const CKPT_VERSION: u32 = 1;
const STEP_NAME: &str = "adam.step";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u32,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_state(epoch: usize, params: &ParameterStore, adam: &AdamState) -> Result<Self> {
        let epoch = u32::try_from(epoch).map_err(|_| Error::invalid("save_checkpoint", "epoch exceeds u32"))?;
        let mut tensors: Vec<(String, Tensor)> =
            params.iter().map(|e| (e.name.clone(), e.value.clone())).collect();
        for (e, (m, v)) in params.iter().zip(adam.m.iter().zip(&adam.v)) {
            tensors.push((format!("{}.m", e.name), m.clone()));
            tensors.push((format!("{}.v", e.name), v.clone()));
        }
        tensors.push((STEP_NAME.to_string(), Tensor::scalar(adam.step as f64)));
        Ok(Checkpoint { epoch, tensors })
    }

    /// Split back into parameters and optimiser state, checking every name
    /// and shape against `layout`.
    pub fn into_state(self, layout: &ParamLayout) -> Result<(usize, ParameterStore, AdamState)> {
        let n = layout.entries().len();
        if self.tensors.len() != 3 * n + 1 {
            return Err(Error::ParamMismatch(format!(
                "checkpoint holds {} tensors, model needs {}",
                self.tensors.len(),
                3 * n + 1
            )));
        }
        let mut it = self.tensors.into_iter();
        let mut params = ParameterStore::new();
        for (name, shape, _) in layout.entries() {
            let (got, t) = it.next().expect("length checked");
            if &got != name || t.shape() != shape.as_slice() {
                return Err(Error::ParamMismatch(format!(
                    "checkpoint tensor {got:?} {:?} does not match model parameter {name:?} {:?}",
                    t.shape(),
                    shape
                )));
            }
            params.insert(got, t)?;
        }
        let mut adam = AdamState::new(&params);
        for (i, (name, shape, _)) in layout.entries().iter().enumerate() {
            for (suffix, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let (got, t) = it.next().expect("length checked");
                if got != format!("{name}.{suffix}") || t.shape() != shape.as_slice() {
                    return Err(Error::ParamMismatch(format!(
                        "checkpoint tensor {got:?} does not match {name}.{suffix}"
                    )));
                }
                *slot = t;
            }
        }
        let (got, step) = it.next().expect("length checked");
        if got != STEP_NAME || step.numel() != 1 {
            return Err(Error::ParamMismatch(format!("expected {STEP_NAME}, found {got:?}")));
        }
        let s = step.item();
        if !(s >= 0.0 && s.fract() == 0.0 && s < 2f64.powi(53)) {
            return Err(Error::Format(format!("invalid adam step {s}")));
        }
        adam.step = s as u64;
        Ok((self.epoch as usize, params, adam))
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let payload: usize = ckpt.tensors.iter().map(|(n, t)| 3 + n.len() + 4 * t.rank() + 8 * t.numel()).sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.epoch.to_le_bytes());
    let count = u32::try_from(ckpt.tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in &ckpt.tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name:?}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank too high: {name:?}")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension too large: {name:?}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{} (needs {n} bytes at offset {}, {} left)",
                what(),
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parse a checkpoint. Never panics on malformed input.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CKPT_MAGIC {
        return Err(Error::Format("bad magic, expected BCKP".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32(|| "header version".into())?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let epoch = r.u32(|| "header epoch".into())?;
    let count = r.u32(|| "header tensor count".into())? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let len = u16::from_le_bytes(
            r.take(2, || format!("name length of tensor #{i}"))?.try_into().expect("2 bytes"),
        ) as usize;
        let raw = r.take(len, || format!("name of tensor #{i}"))?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| Error::Format(format!("name of tensor #{i} is not UTF-8")))?
            .to_string();
        let rank = r.take(1, || format!("rank of tensor {name:?}"))?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(|| format!("dimensions of tensor {name:?}"))? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|b| (n, b)))
            .ok_or_else(|| Error::Format(format!("tensor {name:?} size overflows")))?;
        let raw = r.take(numel.1, || format!("payload of tensor {name:?}"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { epoch, tensors })
}

/// Write via a temporary file and rename, so an interrupted write never
/// replaces a good checkpoint.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        Checkpoint {
            epoch: 3,
            tensors: vec![
                ("a".into(), Tensor::new(vec![2], vec![1.5, -2.0]).unwrap()),
                ("bb".into(), Tensor::new(vec![1, 2], vec![0.25, 8.0]).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let c = small();
        assert_eq!(decode_checkpoint(&encode_checkpoint(&c).unwrap()).unwrap(), c);
    }

    #[test]
    fn layout_of_bytes() {
        let b = encode_checkpoint(&small()).unwrap();
        assert_eq!(&b[..4], b"BCKP");
        assert_eq!(&b[4..16], &[1, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0]);
        // first tensor: len=1, "a", rank 1, dim 2, then 2 f64
        assert_eq!(&b[16..24], &[1, 0, b'a', 1, 2, 0, 0, 0]);
        assert_eq!(&b[24..32], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 16 + (2 + 1 + 1 + 4 + 16) + (2 + 2 + 1 + 8 + 16));
    }

    #[test]
    fn corrupt_magic() {
        let mut b = encode_checkpoint(&small()).unwrap();
        b[1] = b'X';
        assert!(matches!(decode_checkpoint(&b), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version() {
        let mut b = encode_checkpoint(&small()).unwrap();
        b[4] = 2;
        assert!(matches!(decode_checkpoint(&b), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_names_tensor() {
        let b = encode_checkpoint(&small()).unwrap();
        // "bb" starts at byte 40; +10 lands in its dimension list.
        let second_start = 16 + 24;
        let err = decode_checkpoint(&b[..second_start + 10]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)));
        assert!(err.to_string().contains("\"bb\""), "{err}");
        let err = decode_checkpoint(&b[..second_start + 1]).unwrap_err();
        assert!(err.to_string().contains("#1"), "{err}");
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut b = encode_checkpoint(&small()).unwrap();
        b.push(0);
        assert!(decode_checkpoint(&b).is_err());
    }

    #[test]
    fn huge_dimensions_do_not_allocate() {
        let mut b = b"BCKP".to_vec();
        b.extend(1u32.to_le_bytes());
        b.extend(0u32.to_le_bytes());
        b.extend(1u32.to_le_bytes());
        b.extend(1u16.to_le_bytes());
        b.push(b'x');
        b.push(3);
        for _ in 0..3 {
            b.extend(u32::MAX.to_le_bytes());
        }
        assert!(decode_checkpoint(&b).is_err());
    }
}
