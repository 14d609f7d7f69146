//! Training objective: soft Dice on both heads plus a class-balanced edge
//! cross-entropy on the boundary head.

use crate::error::{Error, Result};
use crate::net::ForwardOutput;
use crate::tape::{Tape, Var, PROB_CLAMP};
use crate::tensor::Tensor;

/// Weights of the three loss terms and the Dice stabiliser.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 0.5, lambda3: 0.1, epsilon: 1e-5 }
    }
}

impl LossWeights {
    /// Main-stream Dice only: the shape stream gets no direct supervision.
    pub fn no_edge_loss() -> Self {
        LossWeights { lambda2: 0.0, lambda3: 0.0, ..Self::default() }
    }

    pub fn is_no_edge_ablation(&self) -> bool {
        self.lambda2 == 0.0 && self.lambda3 == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// How the edge/non-edge balance weight is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BetaMode {
    #[default]
    PerBatch,
    PerImage,
}

impl std::str::FromStr for BetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" | "per-batch" => Ok(BetaMode::PerBatch),
            "image" | "per-image" => Ok(BetaMode::PerImage),
            other => Err(Error::Config(format!("unknown beta mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for BetaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BetaMode::PerBatch => "batch",
            BetaMode::PerImage => "image",
        })
    }
}

/// Binary boundary map derived from a label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeTarget {
    pub s_true: Tensor,
    /// Fraction of non-edge pixels over the whole batch.
    pub beta: f64,
    /// Weight used for each sample; all equal to `beta` in per-batch mode.
    pub sample_betas: Vec<f64>,
}

fn check_binary(t: &Tensor, op: &'static str) -> Result<()> {
    if let Some(v) = t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(op, format!("mask must be binary, found {v}")));
    }
    Ok(())
}

/// Inner 4-neighbour boundary: a foreground pixel with at least one
/// background neighbour. Pixels outside the image count as background.
pub fn extract_edge_target(y_true: &Tensor, mode: BetaMode) -> Result<EdgeTarget> {
    let [n, c, h, w] = y_true.dims4("extract_edge_target")?;
    if c != 1 {
        return Err(Error::shape("extract_edge_target", format!("expected 1 channel, got {c}")));
    }
    check_binary(y_true, "extract_edge_target")?;
    let src = y_true.data();
    let mut edges = vec![0.0; src.len()];
    let mut sample_zeros = Vec::with_capacity(n);
    for s in 0..n {
        let m = &src[s * h * w..(s + 1) * h * w];
        let e = &mut edges[s * h * w..(s + 1) * h * w];
        let fg = |y: isize, x: isize| -> bool {
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m[y as usize * w + x as usize] == 1.0
        };
        let mut zeros = 0usize;
        for y in 0..h {
            for x in 0..w {
                let (yi, xi) = (y as isize, x as isize);
                let edge = fg(yi, xi)
                    && !(fg(yi - 1, xi) && fg(yi + 1, xi) && fg(yi, xi - 1) && fg(yi, xi + 1));
                if edge {
                    e[y * w + x] = 1.0;
                } else {
                    zeros += 1;
                }
            }
        }
        sample_zeros.push(zeros);
    }
    let total_zeros: usize = sample_zeros.iter().sum();
    let beta = total_zeros as f64 / (n * h * w) as f64;
    let sample_betas = match mode {
        BetaMode::PerBatch => vec![beta; n],
        BetaMode::PerImage => sample_zeros.iter().map(|&z| z as f64 / (h * w) as f64).collect(),
    };
    Ok(EdgeTarget { s_true: Tensor::new(vec![n, 1, h, w], edges)?, beta, sample_betas })
}

/// `1 - 2Σ(t·p) / (Σt² + Σp² + eps)`.
pub fn dice_loss(y_pred: &Tensor, y_true: &Tensor, eps: f64) -> Result<f64> {
    if y_pred.shape() != y_true.shape() {
        return Err(Error::shape(
            "dice_loss",
            format!("{:?} vs {:?}", y_pred.shape(), y_true.shape()),
        ));
    }
    let (inter, denom) = dice_sums(y_pred, y_true, eps);
    Ok(1.0 - 2.0 * inter / denom)
}

fn dice_sums(p: &Tensor, t: &Tensor, eps: f64) -> (f64, f64) {
    let mut inter = 0.0;
    let mut tt = 0.0;
    let mut pp = 0.0;
    for (&pv, &tv) in p.data().iter().zip(t.data()) {
        inter += tv * pv;
        tt += tv * tv;
        pp += pv * pv;
    }
    (inter, tt + pp + eps)
}

pub(crate) fn dice_loss_grad(p: &Tensor, t: &Tensor, eps: f64) -> Tensor {
    let (inter, denom) = dice_sums(p, t, eps);
    let d2 = denom * denom;
    p.zip_map(t, |pv, tv| -2.0 * (tv * denom - 2.0 * inter * pv) / d2)
        .expect("shapes checked in forward")
}

fn check_edge_shapes(pred: &Tensor, target: &Tensor, betas: &[f64]) -> Result<usize> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "edge_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = pred.shape().first().copied().unwrap_or(1).max(1);
    if betas.len() != n {
        return Err(Error::shape("edge_loss", format!("{} betas for {n} samples", betas.len())));
    }
    Ok(pred.numel() / n)
}

pub(crate) fn edge_bce_value(pred: &Tensor, target: &Tensor, betas: &[f64]) -> Result<f64> {
    let per = check_edge_shapes(pred, target, betas)?;
    let mut loss = 0.0;
    for (s, &beta) in betas.iter().enumerate() {
        let p = &pred.data()[s * per..(s + 1) * per];
        let t = &target.data()[s * per..(s + 1) * per];
        let mut pos = 0.0;
        let mut neg = 0.0;
        for (&pv, &tv) in p.iter().zip(t) {
            let q = pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if tv == 1.0 {
                pos -= q.ln();
            } else {
                neg -= (1.0 - q).ln();
            }
        }
        loss += beta * pos + (1.0 - beta) * neg;
    }
    Ok(loss)
}

pub(crate) fn edge_bce_grad(pred: &Tensor, target: &Tensor, betas: &[f64]) -> Tensor {
    let per = pred.numel() / betas.len();
    Tensor::from_fn(pred.shape(), |i| {
        let beta = betas[i / per];
        let p = pred.data()[i];
        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
            return 0.0;
        }
        if target.data()[i] == 1.0 {
            -beta / p
        } else {
            (1.0 - beta) / (1.0 - p)
        }
    })
}

/// `-β Σ_edge log p - (1-β) Σ_non-edge log(1-p)`, probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn edge_loss(s_pred: &Tensor, target: &EdgeTarget) -> Result<f64> {
    edge_bce_value(s_pred, &target.s_true, &target.sample_betas)
}

/// Scalar loss node plus the unweighted components for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub total_value: f64,
    pub dice_main: f64,
    pub dice_shape: f64,
    pub edge: f64,
}

/// `λ1·Dice(σ(y), y_true) + λ2·Dice(σ(s), s_true) + λ3·Edge(σ(s), s_true)`.
///
/// Terms with a zero weight are still evaluated for logging but are left out
/// of the differentiated sum.
pub fn total_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    y_true: &Tensor,
    weights: &LossWeights,
    beta_mode: BetaMode,
) -> Result<LossTerms> {
    let target = extract_edge_target(y_true, beta_mode)?;
    let y_pred = tape.sigmoid(out.y_logits);
    let s_pred = tape.sigmoid(out.s_logits);
    let d_main = tape.dice_loss(y_pred, y_true, weights.epsilon)?;
    let d_shape = tape.dice_loss(s_pred, &target.s_true, weights.epsilon)?;
    let edge = tape.edge_bce(s_pred, &target.s_true, &target.sample_betas)?;

    let mut total: Option<Var> = None;
    for (lambda, term) in [(weights.lambda1, d_main), (weights.lambda2, d_shape), (weights.lambda3, edge)] {
        if lambda == 0.0 {
            continue;
        }
        let scaled = tape.scale(term, lambda);
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let terms = LossTerms {
        total,
        total_value: tape.value(total).item(),
        dice_main: tape.value(d_main).item(),
        dice_shape: tape.value(d_shape).item(),
        edge: tape.value(edge).item(),
    };
    if !terms.total_value.is_finite() {
        return Err(Error::NonFinite { context: "total loss".into() });
    }
    Ok(terms)
}
