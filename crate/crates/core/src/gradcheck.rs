//! Central finite-difference checks of tape gradients.
//!
//! Every case reduces its output to a scalar with a fixed random projection
//! `L = sum(w * y)`, then compares dL/dθ from [`Tape::backward`] with
//! `(L(θ + h) - L(θ - h)) / 2h` coordinate by coordinate.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::loss::{extract_edge_target, total_loss, BetaMode, LossWeights};
use crate::net::{forward, ForwardOutput, NetworkSpec, GATES};
use crate::nn::{AttentionGateSpec, DsppSpec, ParamLayout, ResidualBlockSpec};
use crate::params::{BoundParams, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// Relative error `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinate with the largest error, `input#i[j]` or `param[j]`.
    pub worst: String,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Graph under test: parameters come through `params`, extra inputs as `inputs`.
pub type Case<'a> = dyn Fn(&mut Tape, &mut BoundParams, &[Var]) -> Result<Var> + 'a;

/// Which coordinates to perturb.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coords {
    All,
    /// A seeded random subset of this size.
    Sample(usize),
}

enum Slot {
    Input(usize),
    Param(usize),
}

fn projected(
    tape: &mut Tape,
    y: Var,
    weights: &mut Option<Tensor>,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = weights.get_or_insert_with(|| Tensor::from_fn(&shape, |_| rng.sample(StandardNormal)));
    if w.shape() != shape.as_slice() {
        return Err(Error::shape("gradcheck", "case output shape changed between evaluations"));
    }
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

/// Compare analytic and numeric gradients of `case` with respect to every
/// input and parameter.
pub fn check(
    name: &str,
    store: &ParameterStore,
    inputs: &[Tensor],
    case: &Case,
    coords: Coords,
    seed: u64,
) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = None;

    let mut tape = Tape::new();
    let mut bound = BoundParams::new(store, true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let y = case(&mut tape, &mut bound, &vars)?;
    let loss = projected(&mut tape, y, &mut weights, &mut rng)?;
    let grads = tape.backward(loss)?;
    let mut analytic_params = store.clone();
    bound.into_binding().write_grads(&grads, &mut analytic_params)?;
    let analytic_inputs: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(grads);
    drop(tape);

    let value_at = |store: &ParameterStore, inputs: &[Tensor], weights: &mut Option<Tensor>| -> Result<f64> {
        let mut tape = Tape::new();
        let mut bound = BoundParams::new(store, false);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = case(&mut tape, &mut bound, &vars)?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let l = projected(&mut tape, y, weights, &mut unused)?;
        Ok(tape.value(l).item())
    };

    let mut all: Vec<(Slot, usize)> = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        all.extend((0..t.numel()).map(|j| (Slot::Input(i), j)));
    }
    for (p, e) in store.iter().enumerate() {
        all.extend((0..e.value.numel()).map(|j| (Slot::Param(p), j)));
    }
    let chosen: Vec<usize> = match coords {
        Coords::All => (0..all.len()).collect(),
        Coords::Sample(n) => {
            let mut idx = sample(&mut rng, all.len(), n.min(all.len())).into_vec();
            idx.sort_unstable();
            idx
        }
    };

    let mut result = CheckResult { name: name.to_string(), max_rel_error: 0.0, worst: String::new(), checked: 0 };
    let mut store_mut = store.clone();
    let mut inputs_mut = inputs.to_vec();
    for &k in &chosen {
        let (slot, j) = &all[k];
        let (orig, analytic, label) = match *slot {
            Slot::Input(i) => (inputs[i].data()[*j], analytic_inputs[i].data()[*j], format!("input#{i}[{j}]")),
            Slot::Param(p) => {
                let e = store.entry(p);
                (e.value.data()[*j], analytic_params.entry(p).grad.data()[*j], format!("{}[{j}]", e.name))
            }
        };
        let mut at = |v: f64, weights: &mut Option<Tensor>| -> Result<f64> {
            match *slot {
                Slot::Input(i) => {
                    inputs_mut[i].data_mut()[*j] = v;
                    let r = value_at(store, &inputs_mut, weights);
                    inputs_mut[i].data_mut()[*j] = orig;
                    r
                }
                Slot::Param(p) => {
                    let name = store.entry(p).name.clone();
                    store_mut.get_mut(&name).expect("same layout").data_mut()[*j] = v;
                    let r = value_at(&store_mut, inputs, weights);
                    store_mut.get_mut(&name).expect("same layout").data_mut()[*j] = orig;
                    r
                }
            }
        };
        let plus = at(orig + STEP, &mut weights)?;
        let minus = at(orig - STEP, &mut weights)?;
        let numeric = (plus - minus) / (2.0 * STEP);
        let err = relative_error(analytic, numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite { context: format!("gradcheck {name} at {label}") });
        }
        if err > result.max_rel_error || result.worst.is_empty() {
            result.max_rel_error = err.max(result.max_rel_error);
            result.worst = label;
        }
        result.checked += 1;
    }
    Ok(result)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
}

/// Disc-shaped labels so the edge target has both classes.
fn disc(n: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[n, 1, h, w], |i| {
        let (y, x) = ((i / w) % h, i % w);
        let (cy, cx) = (h as f64 / 2.0 - 0.5, w as f64 / 2.0 - 0.5);
        let r = h.min(w) as f64 / 3.0;
        if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
            1.0
        } else {
            0.0
        }
    })
}

fn no_params() -> ParameterStore {
    ParameterStore::new()
}

fn block_store(layout: &ParamLayout, seed: u64, rng: &mut ChaCha8Rng) -> Result<ParameterStore> {
    // Perturb the default init so gates, norms and biases are not at their
    // symmetric starting values.
    let mut store = layout.init(seed)?;
    for e in store.iter_mut() {
        for v in e.value.data_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(store)
}

/// Every primitive op and composite block, small enough to finish in seconds.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut case_seed = seed;
    let mut run = |name: &str, store: &ParameterStore, inputs: Vec<Tensor>, case: &Case, coords: Coords| -> Result<()> {
        case_seed = case_seed.wrapping_add(1);
        out.push(check(name, store, &inputs, case, coords, case_seed)?);
        Ok(())
    };
    let none = no_params();

    for (label, stride, dilation, padding) in [("conv2d", 1, 1, 1), ("conv2d_strided", 2, 1, 1), ("conv2d_dilated", 1, 2, 2)] {
        let inputs = vec![randn(&mut rng, &[2, 2, 5, 6]), randn(&mut rng, &[3, 2, 3, 3]), randn(&mut rng, &[3])];
        run(label, &none, inputs, &move |t, _, v| t.conv2d(v[0], v[1], Some(v[2]), stride, dilation, padding), Coords::All)?;
    }
    let inputs = vec![randn(&mut rng, &[1, 3, 4, 4]), randn(&mut rng, &[2, 3, 1, 1])];
    run("conv2d_pointwise", &none, inputs, &|t, _, v| t.conv2d(v[0], v[1], None, 1, 1, 0), Coords::All)?;

    // keep inputs away from the kink at 0
    let x = Tensor::from_fn(&[1, 2, 3, 3], |i| {
        let m = 0.1 + (i as f64 * 0.37) % 1.0;
        if i % 2 == 0 { m } else { -m }
    });
    run("relu", &none, vec![x], &|t, _, v| Ok(t.relu(v[0])), Coords::All)?;
    run("sigmoid", &none, vec![randn(&mut rng, &[1, 2, 3, 3])], &|t, _, v| Ok(t.sigmoid(v[0])), Coords::All)?;
    let ab = vec![randn(&mut rng, &[1, 2, 3, 3]), randn(&mut rng, &[1, 2, 3, 3])];
    run("add", &none, ab.clone(), &|t, _, v| t.add(v[0], v[1]), Coords::All)?;
    run("mul", &none, ab, &|t, _, v| t.mul(v[0], v[1]), Coords::All)?;
    let xg = vec![randn(&mut rng, &[2, 3, 3, 3]), uniform(&mut rng, &[2, 1, 3, 3], 0.1, 0.9)];
    run("mul_channels", &none, xg, &|t, _, v| t.mul_channels(v[0], v[1]), Coords::All)?;
    let cat = vec![randn(&mut rng, &[2, 1, 3, 2]), randn(&mut rng, &[2, 2, 3, 2])];
    run("concat_channels", &none, cat, &|t, _, v| t.concat_channels(v[0], v[1]), Coords::All)?;
    run("resize_up", &none, vec![randn(&mut rng, &[1, 2, 3, 4])], &|t, _, v| t.resize_bilinear(v[0], 7, 9), Coords::All)?;
    run("resize_down", &none, vec![randn(&mut rng, &[1, 2, 8, 6])], &|t, _, v| t.resize_bilinear(v[0], 3, 4), Coords::All)?;
    run("global_avg_pool", &none, vec![randn(&mut rng, &[2, 3, 3, 4])], &|t, _, v| t.global_avg_pool(v[0]), Coords::All)?;
    run("sum", &none, vec![randn(&mut rng, &[2, 3])], &|t, _, v| Ok(t.sum(v[0])), Coords::All)?;
    run("mean", &none, vec![randn(&mut rng, &[2, 3])], &|t, _, v| Ok(t.mean(v[0])), Coords::All)?;
    run("scale", &none, vec![randn(&mut rng, &[4])], &|t, _, v| Ok(t.scale(v[0], -2.5)), Coords::All)?;
    let norm_in = vec![randn(&mut rng, &[2, 3, 3, 4]), randn(&mut rng, &[3]), randn(&mut rng, &[3])];
    run("instance_norm", &none, norm_in, &|t, _, v| t.instance_norm(v[0], v[1], v[2], 1e-5), Coords::All)?;

    let target = binary(&mut rng, &[2, 1, 4, 4]);
    let pred = uniform(&mut rng, &[2, 1, 4, 4], 0.05, 0.95);
    let tgt = target.clone();
    run("dice_loss", &none, vec![pred.clone()], &move |t, _, v| t.dice_loss(v[0], &tgt, 1e-5), Coords::All)?;
    let edge = extract_edge_target(&disc(2, 6, 6), BetaMode::PerImage)?;
    let pred6 = uniform(&mut rng, &[2, 1, 6, 6], 0.05, 0.95);
    run(
        "edge_bce",
        &none,
        vec![pred6],
        &move |t, _, v| t.edge_bce(v[0], &edge.s_true, &edge.sample_betas),
        Coords::All,
    )?;

    for (label, spec) in [
        ("residual_block", ResidualBlockSpec::new(2, 2, 1)),
        ("residual_block_projection", ResidualBlockSpec::new(2, 3, 2)),
    ] {
        let mut layout = ParamLayout::new();
        spec.declare("res", &mut layout);
        let store = block_store(&layout, seed, &mut rng)?;
        let x = randn(&mut rng, &[1, 2, 6, 6]);
        run(label, &store, vec![x], &move |t, p, v| spec.forward(t, p, "res", v[0]), Coords::All)?;
    }

    let gate = AttentionGateSpec { channels: 2, main_channels: 3 };
    let mut layout = ParamLayout::new();
    gate.declare("att", &mut layout);
    let store = block_store(&layout, seed, &mut rng)?;
    let sm = vec![randn(&mut rng, &[2, 2, 4, 4]), randn(&mut rng, &[2, 3, 4, 4])];
    run(
        "attention_gate",
        &store,
        sm.clone(),
        &move |t, p, v| gate.forward(t, p, "att", v[0], v[1]).map(|(o, _)| o),
        Coords::All,
    )?;
    run(
        "attention_map",
        &store,
        sm,
        &move |t, p, v| gate.forward(t, p, "att", v[0], v[1]).map(|(_, a)| a),
        Coords::All,
    )?;

    let dspp = DsppSpec { dilation_rates: vec![1, 2], out_channels: 2 };
    let mut layout = ParamLayout::new();
    dspp.declare("dspp", 2, &mut layout);
    let store = block_store(&layout, seed, &mut rng)?;
    let x = randn(&mut rng, &[1, 2, 5, 5]);
    let d = dspp.clone();
    run("dspp", &store, vec![x], &move |t, p, v| d.forward(t, p, "dspp", v[0]), Coords::All)?;

    let labels = disc(2, 8, 8);
    let logits = vec![randn(&mut rng, &[2, 1, 8, 8]), randn(&mut rng, &[2, 1, 8, 8])];
    for (label, weights, mode) in [
        ("total_loss", LossWeights::default(), BetaMode::PerBatch),
        ("total_loss_per_image", LossWeights::default(), BetaMode::PerImage),
        ("total_loss_no_edge", LossWeights::no_edge_loss(), BetaMode::PerBatch),
    ] {
        let y = labels.clone();
        run(
            label,
            &none,
            logits.clone(),
            &move |t, _, v| {
                let out = ForwardOutput { y_logits: v[0], s_logits: v[1], alphas: Vec::new() };
                total_loss(t, &out, &y, &weights, mode).map(|terms| terms.total)
            },
            Coords::All,
        )?;
    }

    let spec = NetworkSpec {
        levels: GATES,
        base_channels: 2,
        shape_channels: 2,
        dspp: DsppSpec { dilation_rates: vec![1, 2], out_channels: 3 },
        ..NetworkSpec::default()
    };
    let store = crate::net::init_parameters(&spec, seed)?;
    let x = uniform(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let y = disc(1, 8, 8);
    run(
        "network_total_loss",
        &store,
        vec![x],
        &move |t, p, v| {
            let out = forward(t, &spec, p, v[0])?;
            total_loss(t, &out, &y, &LossWeights::default(), BetaMode::PerBatch).map(|terms| terms.total)
        },
        Coords::Sample(40),
    )?;
    Ok(out)
}
