//! Raw forward/backward kernels on flat slices. The tape wraps these with
//! shape checking and gradient bookkeeping.

/// `c = alpha * a * b + beta * c` for row-major `c: [m, n]`, with `a: [m, k]`
/// and `b: [k, n]` described by explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Returns `None` when the output would be empty.
    pub fn new(
        [n, c, h, w]: [usize; 4],
        [k, kc, kh, kw]: [usize; 4],
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Option<Self> {
        debug_assert_eq!(c, kc);
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        if h + 2 * padding < span_h || w + 2 * padding < span_w {
            return None;
        }
        let ho = (h + 2 * padding - span_h) / stride + 1;
        let wo = (w + 2 * padding - span_w) / stride + 1;
        Some(ConvGeom { n, c, h, w, k, kh, kw, stride, dilation, padding, ho, wo })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `ow` whose input column `ow*stride + off` is in bounds.
    fn valid_range(&self, off: isize, out_len: usize, in_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_incl = (in_len as isize - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out_len as isize);
        let lo = lo.clamp(0, hi);
        (lo as usize, hi as usize)
    }
}

/// Unfold one sample `x: [C, H, W]` into `cols: [C*kh*kw, Ho*Wo]`.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.out_pixels();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let off_h = (ki * g.dilation) as isize - g.padding as isize;
            let (oh_lo, oh_hi) = g.valid_range(off_h, g.ho, g.h);
            for kj in 0..g.kw {
                let off_w = (kj * g.dilation) as isize - g.padding as isize;
                let (ow_lo, ow_hi) = g.valid_range(off_w, g.wo, g.w);
                let dst = &mut cols[row * p..(row + 1) * p];
                dst.fill(0.0);
                for oh in oh_lo..oh_hi {
                    let ih = (oh * g.stride) as isize + off_h;
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let out = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if g.stride == 1 {
                        let len = ow_hi - ow_lo;
                        if len == 0 {
                            continue;
                        }
                        let iw0 = (ow_lo as isize + off_w) as usize;
                        out[ow_lo..ow_lo + len].copy_from_slice(&src[iw0..iw0 + len]);
                    } else {
                        for ow in ow_lo..ow_hi {
                            out[ow] = src[((ow * g.stride) as isize + off_w) as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold `cols` back onto `dx: [C, H, W]`, accumulating overlaps.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.out_pixels();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let off_h = (ki * g.dilation) as isize - g.padding as isize;
            let (oh_lo, oh_hi) = g.valid_range(off_h, g.ho, g.h);
            for kj in 0..g.kw {
                let off_w = (kj * g.dilation) as isize - g.padding as isize;
                let (ow_lo, ow_hi) = g.valid_range(off_w, g.wo, g.w);
                let src = &cols[row * p..(row + 1) * p];
                for oh in oh_lo..oh_hi {
                    let ih = ((oh * g.stride) as isize + off_h) as usize;
                    let dst = &mut plane[ih * g.w..(ih + 1) * g.w];
                    let s = &src[oh * g.wo..(oh + 1) * g.wo];
                    for ow in ow_lo..ow_hi {
                        dst[((ow * g.stride) as isize + off_w) as usize] += s[ow];
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> Vec<f64> {
    let p = g.out_pixels();
    let rows = g.col_rows();
    let in_len = g.c * g.h * g.w;
    let out_len = g.k * p;
    let mut out = vec![0.0; g.n * out_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * p] };
    for n in 0..g.n {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let on = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (kk, row) in on.chunks_exact_mut(p).enumerate() {
                row.fill(b[kk]);
            }
        }
        let src: &[f64] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(g.k, rows, p, 1.0, kernel, rows, 1, src, p, 1, beta, on);
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dkernel: Option<Vec<f64>>,
    pub dbias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dkernel: bool,
    need_dbias: bool,
) -> ConvGrads {
    let p = g.out_pixels();
    let rows = g.col_rows();
    let in_len = g.c * g.h * g.w;
    let out_len = g.k * p;
    let mut dx = need_dx.then(|| vec![0.0; g.n * in_len]);
    let mut dk = need_dkernel.then(|| vec![0.0; g.k * rows]);
    let mut db = need_dbias.then(|| vec![0.0; g.k]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * p] };
    let mut dcols = if pointwise || !need_dx { Vec::new() } else { vec![0.0; rows * p] };
    for n in 0..g.n {
        let gn = &gout[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (kk, row) in gn.chunks_exact(p).enumerate() {
                db[kk] += row.iter().sum::<f64>();
            }
        }
        if let Some(dk) = dk.as_mut() {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let src: &[f64] = if pointwise {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            // dK[K, rows] += gout[K, P] * cols^T
            gemm(g.k, p, rows, 1.0, gn, p, 1, src, 1, p, 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if pointwise {
                gemm(rows, g.k, p, 1.0, kernel, 1, rows, gn, p, 1, 0.0, dxn);
            } else {
                gemm(rows, g.k, p, 1.0, kernel, 1, rows, gn, p, 1, 0.0, &mut dcols);
                col2im(&dcols, g, dxn);
            }
        }
    }
    ConvGrads { dx, dkernel: dk, dbias: db }
}

/// Per-axis sampling table for half-pixel-centre bilinear resizing.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut frac = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i0 == i1 { 0.0 } else { src - i0 as f64 });
        }
        AxisTaps { lo, hi, frac }
    }
}

pub(crate) fn resize_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let ty = AxisTaps::new(h, oh);
    let tx = AxisTaps::new(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for xo in 0..ow {
                let (x0, x1, fx) = (tx.lo[xo], tx.hi[xo], tx.frac[xo]);
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                dst[y * ow + xo] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn resize_backward(
    gout: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let ty = AxisTaps::new(h, oh);
    let tx = AxisTaps::new(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &gout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
            for xo in 0..ow {
                let (x0, x1, fx) = (tx.lo[xo], tx.hi[xo], tx.frac[xo]);
                let v = g[y * ow + xo];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

/// Saved statistics of an instance-norm forward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn instance_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    [n, c, h, w]: [usize; 4],
    eps: f64,
) -> (Vec<f64>, NormCache) {
    let m = h * w;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; n * c];
    for s in 0..n {
        for ch in 0..c {
            let idx = s * c + ch;
            let plane = &x[idx * m..(idx + 1) * m];
            let mean = plane.iter().sum::<f64>() / m as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[idx] = inv;
            let xh = &mut xhat[idx * m..(idx + 1) * m];
            let out = &mut y[idx * m..(idx + 1) * m];
            for i in 0..m {
                xh[i] = (plane[i] - mean) * inv;
                out[i] = gamma[ch] * xh[i] + beta[ch];
            }
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn instance_norm_backward(
    gout: &[f64],
    gamma: &[f64],
    cache: &NormCache,
    [n, c, h, w]: [usize; 4],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = h * w;
    let mf = m as f64;
    let mut dx = vec![0.0; gout.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let idx = s * c + ch;
            let g = &gout[idx * m..(idx + 1) * m];
            let xh = &cache.xhat[idx * m..(idx + 1) * m];
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in 0..m {
                sum_g += g[i];
                sum_gx += g[i] * xh[i];
            }
            dgamma[ch] += sum_gx;
            dbeta[ch] += sum_g;
            let scale = gamma[ch] * cache.inv_std[idx] / mf;
            let d = &mut dx[idx * m..(idx + 1) * m];
            for i in 0..m {
                d[i] = scale * (mf * g[i] - sum_g - xh[i] * sum_gx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.k * g.ho * g.wo];
        for n in 0..g.n {
            for kk in 0..g.k {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = 0.0;
                        for c in 0..g.c {
                            for i in 0..g.kh {
                                for j in 0..g.kw {
                                    let iy = (oy * g.stride + i * g.dilation) as isize
                                        - g.padding as isize;
                                    let ix = (ox * g.stride + j * g.dilation) as isize
                                        - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize]
                                        * k[((kk * g.c + c) * g.kh + i) * g.kw + j];
                                }
                            }
                        }
                        out[((n * g.k + kk) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_naive_loop_over_geometries() {
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for &(h, w, kh, stride, dil, pad) in &[
            (5, 5, 3, 1, 1, 1),
            (6, 7, 3, 2, 1, 1),
            (7, 5, 3, 1, 2, 2),
            (8, 8, 1, 2, 1, 0),
            (5, 6, 3, 3, 1, 0),
            (9, 9, 3, 2, 3, 3),
            (4, 4, 1, 1, 1, 0),
        ] {
            let g = ConvGeom::new([2, 3, h, w], [4, 3, kh, kh], stride, dil, pad).unwrap();
            let x: Vec<f64> = (0..2 * 3 * h * w).map(|_| next()).collect();
            let k: Vec<f64> = (0..4 * 3 * kh * kh).map(|_| next()).collect();
            let fast = conv2d_forward(&x, &k, None, &g);
            let slow = naive_conv(&x, &k, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{:?}", g);
            }
        }
    }

    #[test]
    fn geometry_rejects_empty_output() {
        assert!(ConvGeom::new([1, 1, 2, 2], [1, 1, 3, 3], 1, 1, 0).is_none());
        let g = ConvGeom::new([1, 1, 2, 2], [1, 1, 3, 3], 1, 1, 1).unwrap();
        assert_eq!((g.ho, g.wo), (2, 2));
    }

    #[test]
    fn axis_taps_identity_when_sizes_match() {
        let t = AxisTaps::new(5, 5);
        assert_eq!(t.lo, vec![0, 1, 2, 3, 4]);
        assert!(t.frac.iter().all(|&f| f == 0.0));
    }
}
