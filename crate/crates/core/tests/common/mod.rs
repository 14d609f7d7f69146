//! Independent reference implementations shared by the integration tests.
//! Written directly from the formulas with plain loops, never calling the
//! library code they check.
#![allow(dead_code)]

use boundary_seg::metrics::BinaryMask;
use boundary_seg::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(rand_distr::StandardNormal))
}

pub fn rand_binary(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
}

pub fn oracle_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        x.exp() / (1.0 + x.exp())
    }
}

pub fn oracle_dice(p: &[f64], t: &[f64], eps: f64) -> f64 {
    let num: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let den: f64 = t.iter().map(|v| v * v).sum::<f64>() + p.iter().map(|v| v * v).sum::<f64>() + eps;
    1.0 - 2.0 * num / den
}

/// Inner boundary via erosion on a zero-padded copy.
pub fn oracle_edges(mask: &[f64], n: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(mask.len());
    for s in 0..n {
        let mut pad = vec![vec![0u8; w + 2]; h + 2];
        for y in 0..h {
            for x in 0..w {
                pad[y + 1][x + 1] = mask[s * h * w + y * w + x] as u8;
            }
        }
        for y in 1..=h {
            for x in 1..=w {
                let eroded = pad[y][x] & pad[y - 1][x] & pad[y + 1][x] & pad[y][x - 1] & pad[y][x + 1];
                out.push(if pad[y][x] == 1 && eroded == 0 { 1.0 } else { 0.0 });
            }
        }
    }
    out
}

/// Class-balanced BCE with one β per sample.
pub fn oracle_edge_bce(p: &[f64], t: &[f64], betas: &[f64]) -> f64 {
    let per = p.len() / betas.len();
    let mut total = 0.0;
    for (i, (&pv, &tv)) in p.iter().zip(t).enumerate() {
        let q = pv.max(1e-7).min(1.0 - 1e-7);
        let beta = betas[i / per];
        total += if tv == 1.0 { -beta * q.ln() } else { -(1.0 - beta) * (1.0 - q).ln() };
    }
    total
}

pub fn non_edge_fraction(edges: &[f64]) -> f64 {
    edges.iter().filter(|&&e| e == 0.0).count() as f64 / edges.len() as f64
}

/// λ-weighted objective from logits with per-batch β.
pub fn oracle_total(y_logits: &[f64], s_logits: &[f64], label: &[f64], dims: [usize; 3], l: [f64; 3], eps: f64) -> f64 {
    let [n, h, w] = dims;
    let yp: Vec<f64> = y_logits.iter().map(|&v| oracle_sigmoid(v)).collect();
    let sp: Vec<f64> = s_logits.iter().map(|&v| oracle_sigmoid(v)).collect();
    let edges = oracle_edges(label, n, h, w);
    let beta = non_edge_fraction(&edges);
    l[0] * oracle_dice(&yp, label, eps)
        + l[1] * oracle_dice(&sp, &edges, eps)
        + l[2] * oracle_edge_bce(&sp, &edges, &vec![beta; n])
}

pub fn naive_conv2d(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Tensor {
    let (xs, ks) = (x.shape(), k.shape());
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ks[0], ks[2], ks[3]);
    let ho = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    let wo = (w + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bt| bt.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                                let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                let kv = k.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, ho, wo], out).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    let bits = (0..h * w).map(|_| rng.gen_bool(p)).collect();
    BinaryMask::new(h, w, bits).unwrap()
}

fn points(m: &BinaryMask) -> Vec<(f64, f64)> {
    let mut v = Vec::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                v.push((y as f64, x as f64));
            }
        }
    }
    v
}

pub fn brute_counts(a: &BinaryMask, b: &BinaryMask) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (pa, pb) = (a.get(y, x), b.get(y, x));
            na += pa as usize;
            nb += pb as usize;
            inter += (pa && pb) as usize;
        }
    }
    (inter, na, nb)
}

pub fn brute_dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (i, na, nb) = brute_counts(a, b);
    if na + nb == 0 {
        1.0
    } else {
        2.0 * i as f64 / (na + nb) as f64
    }
}

pub fn brute_jaccard(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (i, na, nb) = brute_counts(a, b);
    if na + nb == 0 {
        1.0
    } else {
        i as f64 / (na + nb - i) as f64
    }
}

/// All directed nearest-neighbour distances, A→B followed by B→A.
pub fn brute_directed(a: &BinaryMask, b: &BinaryMask) -> Vec<f64> {
    let (pa, pb) = (points(a), points(b));
    let nearest = |from: &[(f64, f64)], to: &[(f64, f64)]| -> Vec<f64> {
        from.iter()
            .map(|p| to.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .collect::<Vec<_>>()
    };
    let mut d = nearest(&pa, &pb);
    d.extend(nearest(&pb, &pa));
    d
}

/// `None` when exactly one mask is empty.
pub fn brute_hausdorff(a: &BinaryMask, b: &BinaryMask) -> Option<f64> {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Some(0.0),
        (false, false) => Some(brute_directed(a, b).into_iter().fold(0.0, f64::max)),
        _ => None,
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}
