use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    /// Inclusive range of blobs per image.
    pub blob_count: (usize, usize),
    /// Intensity added inside blobs.
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Relative amplitude of the sinusoidal boundary perturbation.
    pub boundary_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            blob_count: (1, 3),
            contrast: 0.6,
            noise_sigma: 0.05,
            boundary_jitter: 0.15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 || self.size > super::MAX_SIDE as usize {
            return Err(Error::Config(format!("size {} outside 4..={}", self.size, super::MAX_SIDE)));
        }
        let (lo, hi) = self.blob_count;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("blob count range {lo}..={hi} is empty or starts at 0")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::Config(format!("contrast must be in (0, 1], got {}", self.contrast)));
        }
        if !(0.0..1.0).contains(&self.boundary_jitter) {
            return Err(Error::Config(format!("boundary_jitter must be in [0, 1), got {}", self.boundary_jitter)));
        }
        Ok(())
    }
}

const BG_LEVEL: f64 = 0.15;
const TEXTURE_WAVES: usize = 3;
const TEXTURE_AMPLITUDE: f64 = 0.03;
const HARMONICS: std::ops::RangeInclusive<usize> = 2..=5;

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos_t: f64,
    sin_t: f64,
    /// `(frequency, weight, phase)`; weights sum to 1.
    harmonics: Vec<(f64, f64, f64)>,
    gain: f64,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let theta = rng.gen_range(0.0..PI);
        let mut harmonics: Vec<(f64, f64, f64)> = HARMONICS
            .map(|k| (k as f64, rng.gen_range(0.0..1.0) / k as f64, rng.gen_range(0.0..2.0 * PI)))
            .collect();
        let total: f64 = harmonics.iter().map(|h| h.1).sum();
        for h in &mut harmonics {
            h.1 /= total;
        }
        Blob {
            cx: rng.gen_range(0.25..0.75) * size,
            cy: rng.gen_range(0.25..0.75) * size,
            rx: rng.gen_range(0.08..0.18) * size,
            ry: rng.gen_range(0.08..0.18) * size,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
            harmonics,
            gain: rng.gen_range(0.8..1.0),
        }
    }

    fn contains(&self, x: f64, y: f64, jitter: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos_t + dy * self.sin_t) / self.rx;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.ry;
        let rho = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        let wobble: f64 = self.harmonics.iter().map(|&(k, a, p)| a * (k * phi + p).sin()).sum();
        rho <= 1.0 + jitter * wobble
    }
}

fn generate_one(config: &SynthConfig, index: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let n = config.size;
    let size = n as f64;

    let waves: Vec<(f64, f64, f64)> = (0..TEXTURE_WAVES)
        .map(|_| {
            let angle = rng.gen_range(0.0..2.0 * PI);
            let freq = rng.gen_range(1.0..3.0) * 2.0 * PI / size;
            (freq * angle.cos(), freq * angle.sin(), rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let count = rng.gen_range(config.blob_count.0..=config.blob_count.1);
    let blobs: Vec<Blob> = (0..count).map(|_| Blob::random(&mut rng, size)).collect();
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let mut image = Vec::with_capacity(n * n);
    let mut mask = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let texture: f64 = waves.iter().map(|&(fx, fy, p)| (fx * px + fy * py + p).sin()).sum();
            let mut v = BG_LEVEL + TEXTURE_AMPLITUDE * texture;
            if let Some(b) = blobs.iter().find(|b| b.contains(px, py, config.boundary_jitter)) {
                v += config.contrast * b.gain;
                mask[y * n + x] = 1.0;
            }
            image.push(v);
        }
    }
    // Tiny blobs at small sizes can miss every pixel centre.
    if mask.iter().all(|&m| m == 0.0) {
        let b = &blobs[0];
        let (x, y) = ((b.cx as usize).min(n - 1), (b.cy as usize).min(n - 1));
        mask[y * n + x] = 1.0;
        image[y * n + x] += config.contrast * b.gain;
    }
    for v in &mut image {
        if config.noise_sigma > 0.0 {
            *v += noise.sample(&mut rng);
        }
        *v = (v.clamp(0.0, 1.0) as f32) as f64;
    }
    Sample::new(Tensor::new(vec![1, n, n], image)?, Tensor::new(vec![1, n, n], mask)?)
}

/// Generate `n` samples. Sample `i` depends only on `(config, i)`.
pub fn generate(config: &SynthConfig, n: usize) -> Result<Vec<Sample>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::invalid("generate", "n must be >= 1"));
    }
    (0..n as u64).map(|i| generate_one(config, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let c = SynthConfig { seed: 9, ..SynthConfig::default() };
        assert_eq!(generate(&c, 3).unwrap(), generate(&c, 3).unwrap());
        let d = SynthConfig { seed: 10, ..c.clone() };
        assert_ne!(generate(&c, 1).unwrap(), generate(&d, 1).unwrap());
    }

    #[test]
    fn prefix_stable() {
        let c = SynthConfig::default();
        let a = generate(&c, 5).unwrap();
        let b = generate(&c, 2).unwrap();
        assert_eq!(&a[..2], &b[..]);
    }

    #[test]
    fn noiseless_full_contrast_is_separable() {
        let c = SynthConfig { noise_sigma: 0.0, contrast: 1.0, seed: 4, ..SynthConfig::default() };
        for s in generate(&c, 10).unwrap() {
            let inside_min = s
                .image
                .data()
                .iter()
                .zip(s.mask.data())
                .filter(|(_, &m)| m == 1.0)
                .map(|(&v, _)| v)
                .fold(f64::INFINITY, f64::min);
            let bg_max = s
                .image
                .data()
                .iter()
                .zip(s.mask.data())
                .filter(|(_, &m)| m == 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(inside_min >= bg_max, "{inside_min} < {bg_max}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { noise_sigma: -1.0, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { blob_count: (0, 2), ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { size: 2, ..SynthConfig::default() }.validate().is_err());
        assert!(generate(&SynthConfig::default(), 0).is_err());
    }

    #[test]
    fn tiny_images_still_have_foreground() {
        let c = SynthConfig { size: 4, ..SynthConfig::default() };
        for s in generate(&c, 20).unwrap() {
            assert!(s.mask.sum() >= 1.0);
        }
    }
}
