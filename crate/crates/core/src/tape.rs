//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape holding its forward value and
//! whatever it needs for the backward rule. Nodes are stored in creation
//! order, so inputs always precede the nodes that consume them and a single
//! reverse sweep visits everything in a valid order.
//!
//! ```
//! use boundary_seg::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let a = tape.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let b = tape.variable(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
//! let p = tape.mul(a, b).unwrap();
//! let loss = tape.sum(p);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
//! assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
//! ```

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, NormCache};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probability clamp used by the edge cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// `[N,C,H,W] * [N,1,H,W]`, the second operand broadcast over channels.
    MulChannels { x: Var, gate: Var },
    Concat { a: Var, b: Var },
    Resize { input: Var, from: (usize, usize), to: (usize, usize) },
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    InstanceNorm { input: Var, gamma: Var, beta: Var, cache: NormCache },
    Dice { pred: Var, target: Tensor, eps: f64 },
    EdgeBce { pred: Var, target: Tensor, betas: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Saturation-safe logistic function.
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that does not receive gradients (data, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients (parameters, or inputs under test).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Cross-correlation with zero padding. `bias` may be omitted.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.value(input).dims4("conv2d")?;
        let ks = self.value(kernel).dims4("conv2d")?;
        if stride == 0 || dilation == 0 {
            return Err(Error::invalid("conv2d", "stride and dilation must be >= 1"));
        }
        if xs[1] != ks[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", xs[1], ks[1]),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [ks[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.value(b).shape(), ks[0]),
                ));
            }
        }
        let geom = ConvGeom::new(xs, ks, stride, dilation, padding).ok_or_else(|| {
            Error::invalid("conv2d", format!("empty output for input {:?} kernel {:?}", xs, ks))
        })?;
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![geom.n, geom.k, geom.ho, geom.wo], out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid_scalar);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y).map_err(|_| {
            Error::shape("add", format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()))
        })?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Hadamard product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("eltwise_mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Multiply `x: [N,C,H,W]` by a single-channel `gate: [N,1,H,W]` broadcast over C.
    pub fn mul_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("mul_channels")?;
        let gs = self.value(gate).dims4("mul_channels")?;
        if gs != [n, 1, h, w] {
            return Err(Error::shape(
                "mul_channels",
                format!("gate {:?} does not broadcast over {:?}", gs, [n, c, h, w]),
            ));
        }
        let m = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gate).data();
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            let gp = &gv[s * m..(s + 1) * m];
            for ch in 0..c {
                let off = (s * c + ch) * m;
                for i in 0..m {
                    out[off + i] = xv[off + i] * gp[i];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[x, gate]);
        Ok(self.push(value, Op::MulChannels { x, gate }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4("concat_channels")?;
        let [nb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("[{na},_,{ha},{wa}] vs [{nb},_,{hb},{wb}]"),
            ));
        }
        let m = ha * wa;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(na * (ca + cb) * m);
        for s in 0..na {
            out.extend_from_slice(&av[s * ca * m..(s + 1) * ca * m]);
            out.extend_from_slice(&bv[s * cb * m..(s + 1) * cb * m]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    /// Bilinear resize with half-pixel centres (`align_corners = false`).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize_bilinear", "output size must be >= 1"));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let out = kernels::resize_forward(self.value(x).data(), n * c, (h, w), (out_h, out_w));
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Resize { input: x, from: (h, w), to: (out_h, out_w) }, rg))
    }

    /// Mean over H and W, giving `[N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let m = (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().sum::<f64>() / m)
            .collect();
        let value = Tensor::new(vec![n, c, 1, 1], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Per-sample, per-channel standardisation followed by a learned affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let dims = self.value(x).dims4("instance_norm")?;
        let c = dims[1];
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape(
                    "instance_norm",
                    format!("{name} shape {:?}, expected [{c}]", self.value(p).shape()),
                ));
            }
        }
        let (out, cache) = kernels::instance_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            dims,
            eps,
        );
        let value = Tensor::new(dims.to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(value, Op::InstanceNorm { input: x, gamma, beta, cache }, rg))
    }

    /// Soft Dice loss `1 - 2Σtp / (Σt² + Σp² + eps)` as a scalar node.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let value = crate::loss::dice_loss(self.value(pred), target, eps)?;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Dice { pred, target: target.clone(), eps },
            rg,
        ))
    }

    /// Class-balanced binary cross-entropy over per-sample `betas`.
    pub fn edge_bce(&mut self, pred: Var, target: &Tensor, betas: &[f64]) -> Result<Var> {
        let value = crate::loss::edge_bce_value(self.value(pred), target, betas)?;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::EdgeBce { pred, target: target.clone(), betas: betas.to_vec() },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every node that requires a
    /// gradient and is reachable from `loss` ends up with one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        lv.ensure_finite(|| "loss".to_string())?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            g.ensure_finite(|| format!("gradient of node {i}"))?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                let r = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g.data(),
                    geom,
                    self.wants(*input),
                    self.wants(*kernel),
                    bias.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = r.dx {
                    let t = Tensor::new(self.value(*input).shape().to_vec(), dx)?;
                    self.accumulate(grads, *input, t);
                }
                if let Some(dk) = r.dkernel {
                    let t = Tensor::new(self.value(*kernel).shape().to_vec(), dk)?;
                    self.accumulate(grads, *kernel, t);
                }
                if let (Some(b), Some(db)) = (bias, r.dbias) {
                    self.accumulate(grads, *b, Tensor::new(vec![geom.k], db)?);
                }
            }
            Op::Relu(x) => {
                let d = self.value(*x).zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = node.value.zip_map(g, |s, gv| gv * s * (1.0 - s))?;
                self.accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.zip_map(self.value(*b), |gv, bv| gv * bv)?;
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.zip_map(self.value(*a), |gv, av| gv * av)?;
                    self.accumulate(grads, *b, d);
                }
            }
            Op::MulChannels { x, gate } => {
                let [n, c, h, w] = g.dims4("mul_channels")?;
                let m = h * w;
                let xv = self.value(*x).data();
                let gv = self.value(*gate).data();
                let mut dx = vec![0.0; g.numel()];
                let mut dgate = vec![0.0; n * m];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * m;
                        for i in 0..m {
                            dx[off + i] = g.data()[off + i] * gv[s * m + i];
                            dgate[s * m + i] += g.data()[off + i] * xv[off + i];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?);
                self.accumulate(grads, *gate, Tensor::new(vec![n, 1, h, w], dgate)?);
            }
            Op::Concat { a, b } => {
                let [n, _, h, w] = g.dims4("concat_channels")?;
                let ca = self.value(*a).shape()[1];
                let cb = self.value(*b).shape()[1];
                let m = h * w;
                let mut da = Vec::with_capacity(n * ca * m);
                let mut db = Vec::with_capacity(n * cb * m);
                for s in 0..n {
                    let base = s * (ca + cb) * m;
                    da.extend_from_slice(&g.data()[base..base + ca * m]);
                    db.extend_from_slice(&g.data()[base + ca * m..base + (ca + cb) * m]);
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, ca, h, w], da)?);
                self.accumulate(grads, *b, Tensor::new(vec![n, cb, h, w], db)?);
            }
            Op::Resize { input, from, to } => {
                let [n, c, ..] = g.dims4("resize_bilinear")?;
                let dx = kernels::resize_backward(g.data(), n * c, *from, *to);
                self.accumulate(grads, *input, Tensor::new(vec![n, c, from.0, from.1], dx)?);
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let m = shape[2] * shape[3];
                let inv = 1.0 / m as f64;
                let mut dx = Vec::with_capacity(m * g.numel());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, m));
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx)?);
            }
            Op::Sum(x) => {
                let d = Tensor::full(self.value(*x).shape(), g.item());
                self.accumulate(grads, *x, d);
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let d = Tensor::full(t.shape(), g.item() / t.numel() as f64);
                self.accumulate(grads, *x, d);
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::InstanceNorm { input, gamma, beta, cache } => {
                let dims = g.dims4("instance_norm")?;
                let (dx, dgamma, dbeta) = kernels::instance_norm_backward(
                    g.data(),
                    self.value(*gamma).data(),
                    cache,
                    dims,
                );
                let c = dims[1];
                self.accumulate(grads, *input, Tensor::new(dims.to_vec(), dx)?);
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?);
            }
            Op::Dice { pred, target, eps } => {
                let d = crate::loss::dice_loss_grad(self.value(*pred), target, *eps);
                self.accumulate(grads, *pred, d.map(|v| v * g.item()));
            }
            Op::EdgeBce { pred, target, betas } => {
                let d = crate::loss::edge_bce_grad(self.value(*pred), target, betas);
                self.accumulate(grads, *pred, d.map(|v| v * g.item()));
            }
        }
        Ok(())
    }
}
