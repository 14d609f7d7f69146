//! Samples, the synthetic generator, and the on-disk sample format.

mod format;
mod synth;

pub use format::{
    decode_sample, encode_sample, load_dataset, load_sample, save_dataset, save_sample, MAGIC, MANIFEST,
    MAX_SIDE, VERSION,
};
pub use synth::{generate, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its binary label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]`, values in `{0, 1}`.
    pub mask: Tensor,
}

impl Sample {
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self> {
        let s = Sample { image, mask };
        s.validate()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::shape("sample", format!("image must be [1,H,W], got {shape:?}")));
        }
        if self.mask.shape() != shape {
            return Err(Error::shape(
                "sample",
                format!("mask {:?} vs image {:?}", self.mask.shape(), shape),
            ));
        }
        if let Some(v) = self.image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("sample", format!("image value {v} outside [0, 1]")));
        }
        if let Some(v) = self.mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("sample", format!("mask value {v} is not binary")));
        }
        Ok(())
    }
}

/// Images and masks of `samples` stacked into `[N, 1, H, W]` tensors.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}
