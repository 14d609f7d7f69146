//! The two-stream boundary-aware network.
//!
//! Main stream: stem, then per level two residual blocks and a stride-2
//! downsample (except after the last level); decoder upsamples ×2, concatenates
//! the matching encoder output and applies one residual block per level.
//!
//! Shape stream: runs at the input resolution with `shape_channels` features.
//! It starts from a 1×1 projection of the stem output. Gate `g` (g = 0, 1, 2)
//! is driven by a 1×1 projection of encoder level `g`, upsampled to full
//! resolution. Gates 0 and 1 are followed by connection residual blocks. The
//! output of the last gate feeds the boundary head and, resized to the
//! bottleneck resolution, is concatenated with the encoder bottleneck before
//! the DSPP fusion that starts the decoder.

use crate::error::{Error, Result};
use crate::nn::{conv, norm, AttentionGateSpec, DsppSpec, ParamLayout, ResidualBlockSpec};
use crate::params::{BoundParams, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Number of attention gates in the shape stream.
pub const GATES: usize = 3;

/// Widest feature map allowed at the bottleneck.
pub const MAX_WIDTH: usize = 512;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub levels: usize,
    pub base_channels: usize,
    pub shape_channels: usize,
    pub dspp: DsppSpec,
    pub in_channels: usize,
    pub out_classes: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            levels: 4,
            base_channels: 16,
            shape_channels: 8,
            dspp: DsppSpec::default(),
            in_channels: 1,
            out_classes: 1,
        }
    }
}

/// Tape handles produced by [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub y_logits: Var,
    pub s_logits: Var,
    /// One single-channel map per gate, in stream order.
    pub alphas: Vec<Var>,
}

impl NetworkSpec {
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < GATES {
            return Err(Error::Config(format!("levels must be >= {GATES}, got {}", self.levels)));
        }
        if self.base_channels == 0 || self.shape_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.levels > 12 || self.bottleneck_channels() > MAX_WIDTH {
            return Err(Error::Config(format!(
                "bottleneck width base_channels*2^(levels-1) must be <= {MAX_WIDTH}"
            )));
        }
        if self.in_channels != 1 || self.out_classes != 1 {
            return Err(Error::Config("only single-channel input and binary output are supported".into()));
        }
        self.dspp.validate()
    }

    /// Required divisor of the input height and width.
    pub fn size_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = self.size_divisor();
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(Error::invalid(
                "forward",
                format!("input {h}x{w} is not divisible by {d} (2^(levels-1))"),
            ));
        }
        Ok(())
    }

    fn encoder_block(&self, level: usize) -> ResidualBlockSpec {
        let c = self.channels(level);
        ResidualBlockSpec::new(c, c, 1)
    }

    fn decoder_block(&self, level: usize) -> ResidualBlockSpec {
        let below = if level + 2 == self.levels {
            self.dspp.out_channels
        } else {
            self.channels(level + 1)
        };
        ResidualBlockSpec::new(below + self.channels(level), self.channels(level), 1)
    }

    fn gate(&self) -> AttentionGateSpec {
        AttentionGateSpec { channels: self.shape_channels, main_channels: self.shape_channels }
    }

    fn connection_block(&self) -> ResidualBlockSpec {
        ResidualBlockSpec::new(self.shape_channels, self.shape_channels, 1)
    }

    /// Every parameter of the network in a fixed order.
    pub fn layout(&self) -> ParamLayout {
        let mut l = ParamLayout::new();
        l.conv("stem", self.channels(0), self.in_channels, 3);
        for level in 0..self.levels {
            for r in 0..2 {
                self.encoder_block(level).declare(&format!("enc{level}.res{r}"), &mut l);
            }
            if level + 1 < self.levels {
                l.conv(&format!("enc{level}.down"), self.channels(level + 1), self.channels(level), 3);
            }
        }
        let s = self.shape_channels;
        l.conv("shape.in", s, self.channels(0), 1);
        for g in 0..GATES {
            l.conv(&format!("shape.tap{g}"), s, self.channels(g), 1);
            self.gate().declare(&format!("shape.att{g}"), &mut l);
            if g + 1 < GATES {
                self.connection_block().declare(&format!("shape.conn{g}"), &mut l);
            }
        }
        l.norm("shape.head_norm", s);
        l.conv("shape.head", self.out_classes, s, 1);
        self.dspp.declare("dspp", self.bottleneck_channels() + s, &mut l);
        for level in (0..self.levels - 1).rev() {
            self.decoder_block(level).declare(&format!("dec{level}"), &mut l);
        }
        l.norm("head_norm", self.channels(0));
        l.conv("head", self.out_classes, self.channels(0), 1);
        l
    }
}

/// Fresh parameters for `spec`, deterministic given `seed`.
pub fn init_parameters(spec: &NetworkSpec, seed: u64) -> Result<ParameterStore> {
    spec.validate()?;
    spec.layout().init(seed)
}

/// Full differentiable forward pass for `x: [N, 1, H, W]`.
pub fn forward(tape: &mut Tape, spec: &NetworkSpec, params: &mut BoundParams, x: Var) -> Result<ForwardOutput> {
    spec.validate()?;
    let [_, c, h, w] = tape.value(x).dims4("forward")?;
    if c != spec.in_channels {
        return Err(Error::shape("forward", format!("input has {c} channels, expected {}", spec.in_channels)));
    }
    spec.check_input(h, w)?;

    // Encoder.
    let stem = conv(tape, params, "stem", x, spec.channels(0), 3, 1, 1)?;
    let mut feats = Vec::with_capacity(spec.levels);
    let mut cur = stem;
    for level in 0..spec.levels {
        for r in 0..2 {
            cur = spec.encoder_block(level).forward(tape, params, &format!("enc{level}.res{r}"), cur)?;
        }
        feats.push(cur);
        if level + 1 < spec.levels {
            cur = conv(tape, params, &format!("enc{level}.down"), cur, spec.channels(level + 1), 3, 2, 1)?;
        }
    }

    // Shape stream.
    let sc = spec.shape_channels;
    let mut s = conv(tape, params, "shape.in", stem, sc, 1, 1, 1)?;
    let mut alphas = Vec::with_capacity(GATES);
    for (g, &feat) in feats.iter().enumerate().take(GATES) {
        let m = conv(tape, params, &format!("shape.tap{g}"), feat, sc, 1, 1, 1)?;
        let m = tape.resize_bilinear(m, h, w)?;
        let (o, alpha) = spec.gate().forward(tape, params, &format!("shape.att{g}"), s, m)?;
        alphas.push(alpha);
        s = if g + 1 < GATES {
            spec.connection_block().forward(tape, params, &format!("shape.conn{g}"), o)?
        } else {
            o
        };
    }
    // Pre-activation blocks leave the stream unnormalised; close it before the head.
    let s_act = norm(tape, params, "shape.head_norm", s)?;
    let s_act = tape.relu(s_act);
    let s_logits = conv(tape, params, "shape.head", s_act, spec.out_classes, 1, 1, 1)?;
    let s_logits = tape.resize_bilinear(s_logits, h, w)?;

    // Fusion and decoder.
    let bottleneck = feats[spec.levels - 1];
    let [_, _, bh, bw] = tape.value(bottleneck).dims4("forward")?;
    let s_small = tape.resize_bilinear(s, bh, bw)?;
    let fused = tape.concat_channels(bottleneck, s_small)?;
    let mut d = spec.dspp.forward(tape, params, "dspp", fused)?;
    for level in (0..spec.levels - 1).rev() {
        let [_, _, fh, fw] = tape.value(feats[level]).dims4("forward")?;
        let up = tape.resize_bilinear(d, fh, fw)?;
        let cat = tape.concat_channels(up, feats[level])?;
        d = spec.decoder_block(level).forward(tape, params, &format!("dec{level}"), cat)?;
    }
    let d = norm(tape, params, "head_norm", d)?;
    let d = tape.relu(d);
    let y_logits = conv(tape, params, "head", d, spec.out_classes, 1, 1, 1)?;
    Ok(ForwardOutput { y_logits, s_logits, alphas })
}

/// Inference result with sigmoid applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub y_prob: Tensor,
    pub s_prob: Tensor,
    pub alphas: Vec<Tensor>,
}

/// Forward pass without gradient tracking.
pub fn predict(spec: &NetworkSpec, store: &ParameterStore, x: &Tensor) -> Result<Prediction> {
    let mut tape = Tape::new();
    let mut params = BoundParams::new(store, false);
    let xv = tape.constant(x.clone());
    let out = forward(&mut tape, spec, &mut params, xv)?;
    let y = tape.sigmoid(out.y_logits);
    let s = tape.sigmoid(out.s_logits);
    Ok(Prediction {
        y_prob: tape.value(y).clone(),
        s_prob: tape.value(s).clone(),
        alphas: out.alphas.iter().map(|&a| tape.value(a).clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        NetworkSpec::default().validate().unwrap();
        assert_eq!(NetworkSpec::default().size_divisor(), 8);
    }

    #[test]
    fn rejects_too_few_levels() {
        let spec = NetworkSpec { levels: 2, ..NetworkSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn rejects_oversized_bottleneck() {
        let spec = NetworkSpec { levels: 7, base_channels: 16, ..NetworkSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn rejects_indivisible_input() {
        let spec = NetworkSpec { levels: 3, base_channels: 2, shape_channels: 2, ..NetworkSpec::default() };
        let store = init_parameters(&spec, 0).unwrap();
        let err = predict(&spec, &store, &Tensor::zeros(&[1, 1, 10, 12])).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument { .. }));
    }

    #[test]
    fn rejects_mismatched_store() {
        let spec = NetworkSpec { levels: 3, base_channels: 2, shape_channels: 2, ..NetworkSpec::default() };
        let other = NetworkSpec { base_channels: 4, ..spec.clone() };
        let store = init_parameters(&other, 0).unwrap();
        let err = predict(&spec, &store, &Tensor::zeros(&[1, 1, 8, 8])).unwrap_err();
        assert!(matches!(err, Error::ParamMismatch(_)));
        assert!(spec.layout().check(&store).is_err());
    }
}
