//! Hard-mask evaluation metrics: Dice score, Jaccard index, Hausdorff distance.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Threshold applied to probabilities to obtain a [`BinaryMask`].
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "binary_mask",
                format!("{}x{} needs {} values, got {}", height, width, height * width, bits.len()),
            ));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask { height, width, bits: vec![false; height * width] }
    }

    /// `p >= 0.5` on a single `[H, W]` plane.
    pub fn from_probs(height: usize, width: usize, probs: &[f64]) -> Result<Self> {
        Self::new(height, width, probs.iter().map(|&p| p >= THRESHOLD).collect())
    }

    /// Split a `[N, 1, H, W]` probability or label tensor into per-sample masks.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Self>> {
        let [n, c, h, w] = t.dims4("binary_mask")?;
        if c != 1 {
            return Err(Error::shape("binary_mask", format!("expected 1 channel, got {c}")));
        }
        (0..n).map(|s| Self::from_probs(h, w, t.plane(s, 0))).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground coordinates as `(row, col)`.
    pub fn points(&self) -> Vec<(usize, usize)> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.height, self.width, other.height, other.width),
            ));
        }
        Ok(())
    }

    fn overlap(&self, other: &Self) -> (usize, usize, usize) {
        let mut inter = 0;
        let mut a = 0;
        let mut b = 0;
        for (&x, &y) in self.bits.iter().zip(&other.bits) {
            a += x as usize;
            b += y as usize;
            inter += (x && y) as usize;
        }
        (inter, a, b)
    }
}

/// `2|A∩B| / (|A| + |B|)`, 1.0 when both masks are empty.
pub fn dice_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_shape(b, "dice_score")?;
    let (inter, na, nb) = a.overlap(b);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `|A∩B| / |A∪B|`, 1.0 when both masks are empty.
pub fn jaccard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_shape(b, "jaccard")?;
    let (inter, na, nb) = a.overlap(b);
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HausdorffVariant {
    #[default]
    Max,
    /// 95th percentile of the pooled directed surface distances.
    Percentile95,
}

/// Symmetric Hausdorff distance over foreground pixel coordinates with unit
/// spacing. Both empty gives 0; exactly one empty is [`Error::Undefined`].
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    hausdorff_with(a, b, HausdorffVariant::Max)
}

pub fn hausdorff_with(a: &BinaryMask, b: &BinaryMask, variant: HausdorffVariant) -> Result<f64> {
    a.same_shape(b, "hausdorff")?;
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            return Err(Error::Undefined("hausdorff distance with exactly one empty mask".into()))
        }
        _ => {}
    }
    let to_b = squared_distance_transform(b);
    let to_a = squared_distance_transform(a);
    let d_ab = directed_sq(a, &to_b);
    let d_ba = directed_sq(b, &to_a);
    match variant {
        HausdorffVariant::Max => {
            let m = d_ab.iter().chain(&d_ba).copied().fold(0.0, f64::max);
            Ok(m.sqrt())
        }
        HausdorffVariant::Percentile95 => {
            let mut all: Vec<f64> = d_ab.iter().chain(&d_ba).map(|v| v.sqrt()).collect();
            all.sort_by(|x, y| x.total_cmp(y));
            Ok(percentile_sorted(&all, 95.0))
        }
    }
}

fn directed_sq(from: &BinaryMask, field: &[f64]) -> Vec<f64> {
    from.bits.iter().zip(field).filter(|(&b, _)| b).map(|(_, &d)| d).collect()
}

/// Linear-interpolated percentile of sorted data.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Exact squared Euclidean distance from every pixel to the nearest
/// foreground pixel of `mask` (separable lower-envelope transform). All
/// values are integers held in `f64`, so square roots agree with a direct
/// `sqrt(dy² + dx²)` bit for bit.
fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let inf = ((h * h + w * w) as f64 + 1.0) * 4.0;
    let mut grid: Vec<f64> = mask.bits.iter().map(|&b| if b { 0.0 } else { inf }).collect();
    let mut col = vec![0.0; h];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        let row = grid[y * w..(y + 1) * w].to_vec();
        edt_1d(&row, &mut out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// One-dimensional squared distance transform of the sampled function `f`
/// (lower envelope of parabolas rooted at each sample).
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let diff = q as f64 - v[k] as f64;
        *dq = diff * diff + f[v[k]];
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-sample metric rows aggregated as mean ± std.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricSummary {
    pub dice: (f64, f64),
    pub jaccard: (f64, f64),
    pub hausdorff: (f64, f64),
    pub samples: usize,
    /// Samples where exactly one mask was empty; excluded from the Hausdorff mean.
    pub hausdorff_undefined: usize,
}

pub fn summarize(
    preds: &[BinaryMask],
    truths: &[BinaryMask],
    variant: HausdorffVariant,
) -> Result<MetricSummary> {
    if preds.len() != truths.len() {
        return Err(Error::shape("summarize", format!("{} predictions vs {} labels", preds.len(), truths.len())));
    }
    let mut dice = Vec::with_capacity(preds.len());
    let mut jac = Vec::with_capacity(preds.len());
    let mut hd = Vec::with_capacity(preds.len());
    let mut undefined = 0;
    for (p, t) in preds.iter().zip(truths) {
        dice.push(dice_score(p, t)?);
        jac.push(jaccard(p, t)?);
        match hausdorff_with(p, t, variant) {
            Ok(d) => hd.push(d),
            Err(Error::Undefined(_)) => undefined += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(MetricSummary {
        dice: mean_std(&dice),
        jaccard: mean_std(&jac),
        hausdorff: mean_std(&hd),
        samples: preds.len(),
        hausdorff_undefined: undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, pts: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for &(y, x) in pts {
            m.set(y, x, true);
        }
        m
    }

    #[test]
    fn dice_cases() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = mask(4, 4, &[(0, 0), (0, 1)]);
        let c = mask(4, 4, &[(3, 3)]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &c).unwrap(), 0.0);
        assert!((dice_score(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let e = BinaryMask::empty(4, 4);
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn jaccard_cases() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = mask(4, 4, &[(0, 0), (0, 1)]);
        let c = mask(4, 4, &[(3, 3)]);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &b).unwrap(), 0.5);
        assert_eq!(jaccard(&a, &c).unwrap(), 0.0);
        let d = dice_score(&a, &b).unwrap();
        assert!((d / (2.0 - d) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = BinaryMask::empty(3, 3);
        let b = BinaryMask::empty(3, 4);
        assert!(dice_score(&a, &b).is_err());
        assert!(jaccard(&a, &b).is_err());
        assert!(hausdorff(&a, &b).is_err());
    }

    #[test]
    fn hausdorff_cases() {
        let a = mask(8, 8, &[(0, 0)]);
        let b = mask(8, 8, &[(3, 4)]);
        assert_eq!(hausdorff(&a, &b).unwrap(), 5.0);
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        let e = BinaryMask::empty(8, 8);
        assert_eq!(hausdorff(&e, &e).unwrap(), 0.0);
        assert!(matches!(hausdorff(&a, &e), Err(Error::Undefined(_))));
    }

    #[test]
    fn hd95_not_above_max() {
        let a = mask(10, 10, &[(0, 0), (0, 1), (1, 0), (9, 9)]);
        let b = mask(10, 10, &[(0, 0), (1, 1)]);
        let hd = hausdorff(&a, &b).unwrap();
        let hd95 = hausdorff_with(&a, &b, HausdorffVariant::Percentile95).unwrap();
        assert!(hd95 <= hd);
        assert!(hd95 > 0.0);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile_sorted(&[0.0, 10.0], 95.0), 9.5);
        assert_eq!(percentile_sorted(&[3.0], 95.0), 3.0);
    }

    #[test]
    fn summary_counts_undefined() {
        let a = mask(4, 4, &[(1, 1)]);
        let e = BinaryMask::empty(4, 4);
        let s = summarize(&[a.clone(), a.clone()], &[a, e], HausdorffVariant::Max).unwrap();
        assert_eq!(s.hausdorff_undefined, 1);
        assert_eq!(s.hausdorff, (0.0, 0.0));
        assert_eq!(s.dice, (0.5, 0.5));
    }
}
