//! Composite blocks built from tape primitives, and the parameter layout /
//! initialisation machinery they share.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with variance `2 / fan_in`.
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
}

/// Ordered declaration of every parameter a model needs.
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.entries.push((name, shape, init));
    }

    pub fn entries(&self) -> &[(String, Vec<usize>, Init)] {
        &self.entries
    }

    /// Kernel `[out, in, k, k]` (He init) and bias `[out]` (zeros).
    pub fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) {
        self.push(format!("{name}.w"), vec![out, inp, k, k], Init::HeNormal { fan_in: inp * k * k });
        self.push(format!("{name}.b"), vec![out], Init::Zeros);
    }

    pub fn norm(&mut self, name: &str, channels: usize) {
        self.push(format!("{name}.gamma"), vec![channels], Init::Ones);
        self.push(format!("{name}.beta"), vec![channels], Init::Zeros);
    }

    /// Materialise the layout. Deterministic given `seed`.
    pub fn init(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for (name, shape, init) in &self.entries {
            let value = match *init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::ones(shape),
                Init::HeNormal { fan_in } => {
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    let dist = Normal::new(0.0, std)
                        .map_err(|e| Error::invalid("init_parameters", e.to_string()))?;
                    Tensor::from_fn(shape, |_| dist.sample(&mut rng))
                }
            };
            store.insert(name.clone(), value)?;
        }
        Ok(store)
    }

    /// Check a store has exactly this layout's names and shapes, in order.
    pub fn check(&self, store: &ParameterStore) -> Result<()> {
        if store.len() != self.entries.len() {
            return Err(Error::ParamMismatch(format!(
                "store has {} tensors, model expects {}",
                store.len(),
                self.entries.len()
            )));
        }
        for ((name, shape, _), entry) in self.entries.iter().zip(store.iter()) {
            if name != &entry.name || shape.as_slice() != entry.value.shape() {
                return Err(Error::ParamMismatch(format!(
                    "expected {name:?} {:?}, found {:?} {:?}",
                    shape,
                    entry.name,
                    entry.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Convolution reading `{name}.w` / `{name}.b`, with "same" padding for odd kernels.
#[allow(clippy::too_many_arguments)]
pub fn conv(
    tape: &mut Tape,
    params: &mut BoundParams,
    name: &str,
    x: Var,
    out: usize,
    k: usize,
    stride: usize,
    dilation: usize,
) -> Result<Var> {
    let inp = tape.value(x).dims4("conv")?[1];
    let w = params.get(tape, &format!("{name}.w"), &[out, inp, k, k])?;
    let b = params.get(tape, &format!("{name}.b"), &[out])?;
    tape.conv2d(x, w, Some(b), stride, dilation, dilation * (k - 1) / 2)
}

pub fn norm(tape: &mut Tape, params: &mut BoundParams, name: &str, x: Var) -> Result<Var> {
    let c = tape.value(x).dims4("instance_norm")?[1];
    let g = params.get(tape, &format!("{name}.gamma"), &[c])?;
    let b = params.get(tape, &format!("{name}.beta"), &[c])?;
    tape.instance_norm(x, g, b, NORM_EPS)
}

/// Pre-activation residual block: `norm → relu → conv3×3 → norm → relu → conv3×3`
/// plus a skip path that is projected by a strided 1×1 convolution whenever
/// the shapes would not otherwise match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ResidualBlockSpec {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ResidualBlockSpec { in_channels, out_channels, stride }
    }

    pub fn has_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }

    pub fn declare(&self, prefix: &str, layout: &mut ParamLayout) {
        layout.norm(&format!("{prefix}.norm1"), self.in_channels);
        layout.conv(&format!("{prefix}.conv1"), self.out_channels, self.in_channels, 3);
        layout.norm(&format!("{prefix}.norm2"), self.out_channels);
        layout.conv(&format!("{prefix}.conv2"), self.out_channels, self.out_channels, 3);
        if self.has_projection() {
            layout.conv(&format!("{prefix}.proj"), self.out_channels, self.in_channels, 1);
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &mut BoundParams, prefix: &str, x: Var) -> Result<Var> {
        let c = tape.value(x).dims4("residual_block")?[1];
        if c != self.in_channels {
            return Err(Error::shape(
                "residual_block",
                format!("input has {c} channels, block expects {}", self.in_channels),
            ));
        }
        let h = norm(tape, params, &format!("{prefix}.norm1"), x)?;
        let h = tape.relu(h);
        let h = conv(tape, params, &format!("{prefix}.conv1"), h, self.out_channels, 3, self.stride, 1)?;
        let h = norm(tape, params, &format!("{prefix}.norm2"), h)?;
        let h = tape.relu(h);
        let h = conv(tape, params, &format!("{prefix}.conv2"), h, self.out_channels, 3, 1, 1)?;
        let skip = if self.has_projection() {
            conv(tape, params, &format!("{prefix}.proj"), x, self.out_channels, 1, self.stride, 1)?
        } else {
            x
        };
        tape.add(h, skip)
    }
}

/// Gate producing a single-channel attention map from the shape-stream
/// features and the main-stream features at the same resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionGateSpec {
    /// Shape-stream width.
    pub channels: usize,
    /// Width of the gating main-stream features.
    pub main_channels: usize,
}

impl AttentionGateSpec {
    pub fn declare(&self, prefix: &str, layout: &mut ParamLayout) {
        layout.conv(&format!("{prefix}.gate"), 1, self.channels + self.main_channels, 1);
    }

    /// Returns `(s ⊙ α, α)` with `α = σ(conv1×1(s ‖ m))`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &mut BoundParams,
        prefix: &str,
        s: Var,
        m: Var,
    ) -> Result<(Var, Var)> {
        let [_, cs, hs, ws] = tape.value(s).dims4("attention_gate")?;
        let [_, cm, hm, wm] = tape.value(m).dims4("attention_gate")?;
        if (hs, ws) != (hm, wm) {
            return Err(Error::shape(
                "attention_gate",
                format!("shape features {hs}x{ws} vs main features {hm}x{wm}"),
            ));
        }
        if cs != self.channels || cm != self.main_channels {
            return Err(Error::shape(
                "attention_gate",
                format!("channels ({cs}, {cm}), expected ({}, {})", self.channels, self.main_channels),
            ));
        }
        let cat = tape.concat_channels(s, m)?;
        let logits = conv(tape, params, &format!("{prefix}.gate"), cat, 1, 1, 1, 1)?;
        let alpha = tape.sigmoid(logits);
        let out = tape.mul_channels(s, alpha)?;
        Ok((out, alpha))
    }
}

/// Dilated spatial pyramid pooling: parallel 3×3 convolutions at increasing
/// dilation plus a global-average-pool branch, fused by a 1×1 convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DsppSpec {
    pub dilation_rates: Vec<usize>,
    pub out_channels: usize,
}

impl Default for DsppSpec {
    fn default() -> Self {
        DsppSpec { dilation_rates: vec![1, 2, 4], out_channels: 128 }
    }
}

impl DsppSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dilation_rates.first() != Some(&1) {
            return Err(Error::Config("dspp rates must start at 1".into()));
        }
        if self.dilation_rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("dspp rates must be strictly increasing".into()));
        }
        if self.out_channels == 0 {
            return Err(Error::Config("dspp out_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn declare(&self, prefix: &str, in_channels: usize, layout: &mut ParamLayout) {
        for (i, _) in self.dilation_rates.iter().enumerate() {
            layout.conv(&format!("{prefix}.branch{i}"), self.out_channels, in_channels, 3);
        }
        layout.conv(&format!("{prefix}.pool"), self.out_channels, in_channels, 1);
        let fused_in = self.out_channels * (self.dilation_rates.len() + 1);
        layout.conv(&format!("{prefix}.fuse"), self.out_channels, fused_in, 1);
    }

    /// Per-branch outputs before fusion: one per dilation rate, then the pooled branch.
    pub fn branches(&self, tape: &mut Tape, params: &mut BoundParams, prefix: &str, x: Var) -> Result<Vec<Var>> {
        let [_, _, h, w] = tape.value(x).dims4("dspp")?;
        let mut outs = Vec::with_capacity(self.dilation_rates.len() + 1);
        for (i, &rate) in self.dilation_rates.iter().enumerate() {
            let b = conv(tape, params, &format!("{prefix}.branch{i}"), x, self.out_channels, 3, 1, rate)?;
            outs.push(tape.relu(b));
        }
        let pooled = tape.global_avg_pool(x)?;
        let p = conv(tape, params, &format!("{prefix}.pool"), pooled, self.out_channels, 1, 1, 1)?;
        let p = tape.relu(p);
        outs.push(tape.resize_bilinear(p, h, w)?);
        Ok(outs)
    }

    pub fn forward(&self, tape: &mut Tape, params: &mut BoundParams, prefix: &str, x: Var) -> Result<Var> {
        let branches = self.branches(tape, params, prefix, x)?;
        let mut cat = branches[0];
        for &b in &branches[1..] {
            cat = tape.concat_channels(cat, b)?;
        }
        conv(tape, params, &format!("{prefix}.fuse"), cat, self.out_channels, 1, 1, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_for(layout: &ParamLayout, seed: u64) -> ParameterStore {
        layout.init(seed).unwrap()
    }

    #[test]
    fn residual_zero_branch_is_identity() {
        let spec = ResidualBlockSpec::new(3, 3, 1);
        let mut layout = ParamLayout::new();
        spec.declare("rb", &mut layout);
        let mut store = store_for(&layout, 1);
        for e in store.iter_mut() {
            if e.name.contains("conv") {
                e.value.data_mut().fill(0.0);
            }
        }
        let x = Tensor::from_fn(&[2, 3, 5, 5], |i| (i as f64 * 0.37).sin());
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut p = BoundParams::new(&store, true);
        let y = spec.forward(&mut tape, &mut p, "rb", xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn residual_strided_shape() {
        let spec = ResidualBlockSpec::new(8, 16, 2);
        assert!(spec.has_projection());
        let mut layout = ParamLayout::new();
        spec.declare("rb", &mut layout);
        let store = store_for(&layout, 2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 8, 32, 32], |i| (i % 7) as f64));
        let mut p = BoundParams::new(&store, false);
        let y = spec.forward(&mut tape, &mut p, "rb", x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 16, 16, 16]);
    }

    #[test]
    fn residual_channel_mismatch() {
        let spec = ResidualBlockSpec::new(4, 4, 1);
        let mut layout = ParamLayout::new();
        spec.declare("rb", &mut layout);
        let store = store_for(&layout, 2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let mut p = BoundParams::new(&store, false);
        assert!(spec.forward(&mut tape, &mut p, "rb", x).is_err());
    }

    fn gate_fixture(bias: f64) -> (Tensor, Tensor, Tensor) {
        let spec = AttentionGateSpec { channels: 2, main_channels: 3 };
        let mut layout = ParamLayout::new();
        spec.declare("g", &mut layout);
        let mut store = store_for(&layout, 3);
        store.get_mut("g.gate.w").unwrap().data_mut().fill(0.0);
        store.get_mut("g.gate.b").unwrap().data_mut().fill(bias);
        let s = Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.9).cos() * 3.0);
        let m = Tensor::from_fn(&[1, 3, 4, 4], |i| (i as f64 * 0.4).sin());
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let mv = tape.constant(m);
        let mut p = BoundParams::new(&store, false);
        let (o, a) = spec.forward(&mut tape, &mut p, "g", sv, mv).unwrap();
        (s, tape.value(o).clone(), tape.value(a).clone())
    }

    #[test]
    fn gate_zero_params_halves_input() {
        let (s, o, a) = gate_fixture(0.0);
        assert_eq!(a.shape(), &[1, 1, 4, 4]);
        assert!(a.data().iter().all(|&v| v == 0.5));
        assert_eq!(o, s.map(|v| 0.5 * v));
    }

    #[test]
    fn gate_saturated_bias_passes_input() {
        let (s, o, _) = gate_fixture(100.0);
        assert!(o.max_abs_diff(&s) < 1e-10);
    }

    #[test]
    fn gate_spatial_mismatch() {
        let spec = AttentionGateSpec { channels: 1, main_channels: 1 };
        let mut layout = ParamLayout::new();
        spec.declare("g", &mut layout);
        let store = store_for(&layout, 3);
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let m = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let mut p = BoundParams::new(&store, false);
        assert!(matches!(
            spec.forward(&mut tape, &mut p, "g", s, m),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dspp_rate_validation() {
        assert!(DsppSpec::default().validate().is_ok());
        assert!(DsppSpec { dilation_rates: vec![2, 4], out_channels: 4 }.validate().is_err());
        assert!(DsppSpec { dilation_rates: vec![1, 4, 4], out_channels: 4 }.validate().is_err());
    }

    #[test]
    fn dspp_output_shape() {
        for rates in [vec![1], vec![1, 2], vec![1, 3, 6, 9]] {
            let spec = DsppSpec { dilation_rates: rates, out_channels: 5 };
            let mut layout = ParamLayout::new();
            spec.declare("d", 3, &mut layout);
            let store = store_for(&layout, 4);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_fn(&[2, 3, 6, 7], |i| (i as f64).sqrt()));
            let mut p = BoundParams::new(&store, false);
            let y = spec.forward(&mut tape, &mut p, "d", x).unwrap();
            assert_eq!(tape.value(y).shape(), &[2, 5, 6, 7]);
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let mut layout = ParamLayout::new();
        ResidualBlockSpec::new(4, 8, 2).declare("rb", &mut layout);
        let a = layout.init(11).unwrap();
        let b = layout.init(11).unwrap();
        let c = layout.init(12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.get("rb.norm1.gamma").unwrap(), &Tensor::ones(&[4]));
        assert_eq!(a.get("rb.norm1.beta").unwrap(), &Tensor::zeros(&[4]));
        assert_eq!(a.get("rb.conv1.b").unwrap(), &Tensor::zeros(&[8]));
        layout.check(&a).unwrap();
    }

    #[test]
    fn he_variance_matches_fan_in() {
        let mut layout = ParamLayout::new();
        layout.conv("big", 64, 32, 3);
        let store = layout.init(5).unwrap();
        let w = store.get("big.w").unwrap();
        assert!(w.numel() >= 10_000);
        let n = w.numel() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = 2.0 / (32.0 * 9.0);
        assert!((var / expected - 1.0).abs() < 0.2, "var {var} expected {expected}");
    }
}
