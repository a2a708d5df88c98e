//! Batched NHWC kernels. Convolution lowers to im2col + GEMM.

use crate::tensor::Scalar;

const K: usize = 3;
/// Target rows per convolution GEMM; small feature maps are grouped.
const GEMM_ROWS: usize = 4096;
/// Cap on the im2col scratch buffer, in elements.
const MAX_COLS: usize = 8 << 20;

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvDims {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn patch(&self) -> usize {
        K * K * self.cin
    }

    /// Samples processed per GEMM.
    fn group(&self) -> usize {
        let by_rows = (GEMM_ROWS / self.hw()).max(1);
        let by_mem = (MAX_COLS / (self.hw() * self.patch())).max(1);
        by_rows.min(by_mem).min(self.batch).max(1)
    }
}

/// Patch matrix for `n` samples: row `(s, y, x)`, column `(ky, kx, c)`.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, n: usize, cols: &mut Vec<T>) {
    let (h, w, cin, patch) = (d.h, d.w, d.cin, d.patch());
    cols.clear();
    cols.resize(n * h * w * patch, T::zero());
    for s in 0..n {
        let xs = &x[s * h * w * cin..(s + 1) * h * w * cin];
        for oy in 0..h {
            for ox in 0..w {
                let row = &mut cols[((s * h + oy) * w + ox) * patch..][..patch];
                for ky in 0..K {
                    let iy = oy + ky;
                    if iy < 1 || iy > h {
                        continue;
                    }
                    for kx in 0..K {
                        let ix = ox + kx;
                        if ix < 1 || ix > w {
                            continue;
                        }
                        let src = ((iy - 1) * w + (ix - 1)) * cin;
                        row[(ky * K + kx) * cin..][..cin].copy_from_slice(&xs[src..src + cin]);
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-gradient matrix back onto `n` input samples.
fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, n: usize, dx: &mut [T]) {
    let (h, w, cin, patch) = (d.h, d.w, d.cin, d.patch());
    for s in 0..n {
        let dxs = &mut dx[s * h * w * cin..(s + 1) * h * w * cin];
        for oy in 0..h {
            for ox in 0..w {
                let row = &cols[((s * h + oy) * w + ox) * patch..][..patch];
                for ky in 0..K {
                    let iy = oy + ky;
                    if iy < 1 || iy > h {
                        continue;
                    }
                    for kx in 0..K {
                        let ix = ox + kx;
                        if ix < 1 || ix > w {
                            continue;
                        }
                        let dst = ((iy - 1) * w + (ix - 1)) * cin;
                        for (o, g) in dxs[dst..dst + cin].iter_mut().zip(&row[(ky * K + kx) * cin..][..cin]) {
                            *o += *g;
                        }
                    }
                }
            }
        }
    }
}

/// 3×3 same-padded cross-correlation; `weight` is `(kh, kw, cin, cout)`.
pub fn conv_forward<T: Scalar>(x: &[T], d: &ConvDims, weight: &[T], bias: &[T]) -> Vec<T> {
    let (hw, patch, cout) = (d.hw(), d.patch(), d.cout);
    let mut out = vec![T::zero(); d.batch * hw * cout];
    let mut cols = Vec::new();
    let group = d.group();
    let mut s = 0;
    while s < d.batch {
        let n = group.min(d.batch - s);
        im2col(&x[s * hw * d.cin..], d, n, &mut cols);
        let rows = n * hw;
        let dst = &mut out[s * hw * cout..(s + n) * hw * cout];
        T::gemm(rows, patch, cout, T::one(), &cols, patch as isize, 1, weight, cout as isize, 1, T::zero(), dst, cout as isize, 1);
        s += n;
    }
    for row in out.chunks_exact_mut(cout) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += *b;
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
    pub input: Option<Vec<T>>,
}

/// Backward pass of [`conv_forward`]. `x` is only read when the weight
/// gradient is requested.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    x: Option<&[T]>,
    d: &ConvDims,
    weight: &[T],
    dout: &[T],
    want_weight: bool,
    want_bias: bool,
    want_input: bool,
) -> ConvGrads<T> {
    let (hw, patch, cout) = (d.hw(), d.patch(), d.cout);
    let mut dw = want_weight.then(|| vec![T::zero(); patch * cout]);
    let mut dx = want_input.then(|| vec![T::zero(); d.batch * hw * d.cin]);
    let db = want_bias.then(|| {
        let mut db = vec![T::zero(); cout];
        for row in dout.chunks_exact(cout) {
            for (g, v) in db.iter_mut().zip(row) {
                *g += *v;
            }
        }
        db
    });
    let mut cols = Vec::new();
    let group = d.group();
    let mut s = 0;
    while s < d.batch {
        let n = group.min(d.batch - s);
        let rows = n * hw;
        let dout_g = &dout[s * hw * cout..(s + n) * hw * cout];
        if let Some(dw) = dw.as_mut() {
            let x = x.expect("conv input retained for weight gradient");
            im2col(&x[s * hw * d.cin..], d, n, &mut cols);
            // (patch × rows) @ (rows × cout), reading cols transposed.
            T::gemm(patch, rows, cout, T::one(), &cols, 1, patch as isize, dout_g, cout as isize, 1, T::one(), dw, cout as isize, 1);
        }
        if let Some(dx) = dx.as_mut() {
            cols.clear();
            cols.resize(rows * patch, T::zero());
            // (rows × cout) @ (cout × patch), reading weight transposed.
            T::gemm(rows, cout, patch, T::one(), dout_g, cout as isize, 1, weight, 1, cout as isize, T::zero(), &mut cols, patch as isize, 1);
            col2im(&cols, d, n, &mut dx[s * hw * d.cin..]);
        }
        s += n;
    }
    ConvGrads {
        weight: dw,
        bias: db,
        input: dx,
    }
}

/// 2×2 stride-2 max pooling (floor). Returns outputs and the per-sample
/// flat input offset of each maximum; ties pick the first in row-major order.
pub fn maxpool_forward<T: Scalar>(x: &[T], batch: usize, h: usize, w: usize, c: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); batch * oh * ow * c];
    let mut arg = vec![0u32; batch * oh * ow * c];
    let per_out = oh * ow * c;
    for s in 0..batch {
        let xs = &x[s * h * w * c..(s + 1) * h * w * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = s * per_out + (oy * ow + ox) * c;
                let base = [
                    ((2 * oy) * w + 2 * ox) * c,
                    ((2 * oy) * w + 2 * ox + 1) * c,
                    ((2 * oy + 1) * w + 2 * ox) * c,
                    ((2 * oy + 1) * w + 2 * ox + 1) * c,
                ];
                let dst = &mut out[o..o + c];
                let idx = &mut arg[o..o + c];
                dst.copy_from_slice(&xs[base[0]..base[0] + c]);
                for (ch, a) in idx.iter_mut().enumerate() {
                    *a = (base[0] + ch) as u32;
                }
                for &b in &base[1..] {
                    for (ch, ((d, a), v)) in dst.iter_mut().zip(idx.iter_mut()).zip(&xs[b..b + c]).enumerate() {
                        if *v > *d {
                            *d = *v;
                            *a = (b + ch) as u32;
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(dout: &[T], argmax: &[u32], batch: usize, in_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); batch * in_len];
    let per = argmax.len() / batch.max(1);
    for s in 0..batch {
        let dxs = &mut dx[s * in_len..(s + 1) * in_len];
        for (g, &a) in dout[s * per..(s + 1) * per].iter().zip(&argmax[s * per..(s + 1) * per]) {
            dxs[a as usize] += *g;
        }
    }
    dx
}

/// Rows summed in `T` before each partial sum is folded into f64.
const SUM_BLOCK: usize = 256;

/// Per-channel sums of `f(row values)` over every row, with blocked f64
/// accumulation.
fn channel_sums<T: Scalar>(x: &[T], c: usize, mut f: impl FnMut(&mut [T], &[T])) -> Vec<f64> {
    let mut total = vec![0.0f64; c];
    let mut part = vec![T::zero(); c];
    for block in x.chunks(c * SUM_BLOCK) {
        part.iter_mut().for_each(|p| *p = T::zero());
        for row in block.chunks_exact(c) {
            f(&mut part, row);
        }
        for (t, p) in total.iter_mut().zip(&part) {
            *t += p.as_f64();
        }
    }
    total
}

/// Per-channel mean and biased variance over every leading position.
pub fn channel_moments<T: Scalar>(x: &[T], c: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = (x.len() / c) as f64;
    let mean: Vec<f64> = channel_sums(x, c, |part, row| {
        for (p, v) in part.iter_mut().zip(row) {
            *p += *v;
        }
    })
    .into_iter()
    .map(|s| s / rows)
    .collect();
    let mean_t: Vec<T> = mean.iter().map(|m| T::of_f64(*m)).collect();
    let var = channel_sums(x, c, |part, row| {
        for ((p, v), m) in part.iter_mut().zip(row).zip(&mean_t) {
            let d = *v - *m;
            *p += d * d;
        }
    })
    .into_iter()
    .map(|s| s / rows)
    .collect();
    (mean, var)
}

/// Normalizes `x` in place with the given moments. Returns `xhat` when asked
/// for it, and the per-channel inverse standard deviation.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_apply<T: Scalar>(
    x: &mut [T],
    c: usize,
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
    epsilon: f64,
    keep_xhat: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let inv_std: Vec<T> = var.iter().map(|v| T::of_f64(1.0 / (v.as_f64() + epsilon).sqrt())).collect();
    let mut xhat = keep_xhat.then(|| vec![T::zero(); x.len()]);
    match xhat.as_mut() {
        Some(xhat) => {
            for (row, hrow) in x.chunks_exact_mut(c).zip(xhat.chunks_exact_mut(c)) {
                for ((((v, h), m), s), (g, b)) in row.iter_mut().zip(hrow).zip(mean).zip(&inv_std).zip(gamma.iter().zip(beta)) {
                    *h = (*v - *m) * *s;
                    *v = *g * *h + *b;
                }
            }
        }
        None => {
            for row in x.chunks_exact_mut(c) {
                for (((v, m), s), (g, b)) in row.iter_mut().zip(mean).zip(&inv_std).zip(gamma.iter().zip(beta)) {
                    *v = *g * ((*v - *m) * *s) + *b;
                }
            }
        }
    }
    (xhat, inv_std)
}

/// Returns (dx, dgamma, dbeta). With `batch_stats` the normalization
/// moments are treated as functions of the input. `dy` is overwritten.
pub fn batchnorm_backward<T: Scalar>(
    mut dy: Vec<T>,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    c: usize,
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = dy.len() / c;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut pg = vec![T::zero(); c];
    let mut pb = vec![T::zero(); c];
    for (gblock, hblock) in dy.chunks(c * SUM_BLOCK).zip(xhat.chunks(c * SUM_BLOCK)) {
        pg.iter_mut().chain(pb.iter_mut()).for_each(|p| *p = T::zero());
        for (g, xh) in gblock.chunks_exact(c).zip(hblock.chunks_exact(c)) {
            for (((a, b), gv), hv) in pg.iter_mut().zip(pb.iter_mut()).zip(g).zip(xh) {
                *a += *gv * *hv;
                *b += *gv;
            }
        }
        for ch in 0..c {
            dgamma[ch] += pg[ch].as_f64();
            dbeta[ch] += pb[ch].as_f64();
        }
    }
    if batch_stats {
        // dxhat = dy·γ; dx = inv_std · (dxhat − mean(dxhat) − xhat·mean(dxhat·xhat))
        let n = rows as f64;
        let mean_dxhat: Vec<T> = (0..c).map(|ch| T::of_f64(dbeta[ch] * gamma[ch].as_f64() / n)).collect();
        let mean_dxhat_xhat: Vec<T> = (0..c).map(|ch| T::of_f64(dgamma[ch] * gamma[ch].as_f64() / n)).collect();
        for (g, xh) in dy.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
            for (((((v, h), gm), s), a), b) in g.iter_mut().zip(xh).zip(gamma).zip(inv_std).zip(&mean_dxhat).zip(&mean_dxhat_xhat) {
                *v = *s * (*v * *gm - *a - *h * *b);
            }
        }
    } else {
        for g in dy.chunks_exact_mut(c) {
            for ((v, gm), s) in g.iter_mut().zip(gamma).zip(inv_std) {
                *v = *v * *gm * *s;
            }
        }
    }
    (
        dy,
        dgamma.into_iter().map(T::of_f64).collect(),
        dbeta.into_iter().map(T::of_f64).collect(),
    )
}

/// `x (rows × n) @ w (n × m) + b`.
pub fn dense_forward<T: Scalar>(x: &[T], rows: usize, n: usize, w: &[T], b: &[T], m: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * m);
    for _ in 0..rows {
        out.extend_from_slice(b);
    }
    T::gemm(rows, n, m, T::one(), x, n as isize, 1, w, m as isize, 1, T::one(), &mut out, m as isize, 1);
    out
}

pub fn dense_weight_grad<T: Scalar>(x: &[T], rows: usize, n: usize, dy: &[T], m: usize) -> Vec<T> {
    let mut dw = vec![T::zero(); n * m];
    T::gemm(n, rows, m, T::one(), x, 1, n as isize, dy, m as isize, 1, T::zero(), &mut dw, m as isize, 1);
    dw
}

pub fn dense_input_grad<T: Scalar>(dy: &[T], rows: usize, m: usize, w: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * n];
    T::gemm(rows, m, n, T::one(), dy, m as isize, 1, w, 1, m as isize, T::zero(), &mut dx, n as isize, 1);
    dx
}

pub fn column_sums<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut s = vec![T::zero(); width];
    for row in x.chunks_exact(width) {
        for (a, v) in s.iter_mut().zip(row) {
            *a += *v;
        }
    }
    s
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &z in row {
            let e = (z - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|p| *p = *p / sum);
    }
    out
}

pub const PROBABILITY_FLOOR: f64 = 1e-7;

/// Mean over rows of `-Σ_j y_j · ln(clamp(p_j, 1e-7, 1))`.
pub fn cross_entropy_rows<T: Scalar>(probs: &[T], targets: &[T], width: usize) -> f64 {
    let rows = probs.len() / width;
    let mut total = 0.0;
    for (p, y) in probs.chunks_exact(width).zip(targets.chunks_exact(width)) {
        for (pj, yj) in p.iter().zip(y) {
            let yj = yj.as_f64();
            if yj != 0.0 {
                total -= yj * pj.as_f64().clamp(PROBABILITY_FLOOR, 1.0).ln();
            }
        }
    }
    total / rows as f64
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1/(1-rate)`.
pub(crate) fn dropout_scale<T: Scalar>(rng: &mut crate::rng::SplitMix64, rate: f64, n: usize) -> Vec<T> {
    let keep = T::of_f64(1.0 / (1.0 - rate));
    (0..n).map(|_| if rng.next_f64() < rate { T::zero() } else { keep }).collect()
}
