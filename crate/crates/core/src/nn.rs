//! Forward and backward kernels for the layers the U-Net and the feature
//! extractor are built from.
//!
//! All kernels work on raw `[N, C, D, H, W]` buffers. 2D layers are the
//! `D = 1` case with a `(1, k, k)` kernel. Convolutions use stride 1 and
//! "same" zero padding and are lowered to GEMM via im2col.

use matrixmultiply::dgemm;

/// Geometry of one same-padded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    /// Spatial size `(D, H, W)` of input and output.
    pub size: [usize; 3],
    /// Kernel extent per axis; each odd.
    pub kernel: [usize; 3],
}

impl ConvGeom {
    pub fn positions(&self) -> usize {
        self.size.iter().product()
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.cin * self.taps()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1]
    }
}

/// Column-matrix budget in elements; chunks of output rows are sized so
/// the unrolled patch matrix stays cache resident.
const COL_BUDGET: usize = 1 << 15;

/// Output rows (fixed `(z, y)`, length `W`) processed per chunk.
fn rows_per_chunk(g: &ConvGeom) -> usize {
    let [d, h, w] = g.size;
    (COL_BUDGET / (g.patch_len() * w).max(1)).clamp(1, d * h)
}

/// Unrolls output rows `r0..r1` (row = `z·H + y`) of one sample
/// `[Cin, D, H, W]` into `[Cin·taps, (r1 − r0)·W]`.
fn im2col(x: &[f64], g: &ConvGeom, r0: usize, r1: usize, col: &mut [f64]) {
    let [d, h, w] = g.size;
    let [kd, kh, kw] = g.kernel;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let p = g.positions();
    let pc = (r1 - r0) * w;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * p..(ci + 1) * p];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let dst = &mut col[row * pc..(row + 1) * pc];
                    let off_w = c as isize - pw;
                    let (w_lo, w_hi) = (
                        (-off_w).clamp(0, w as isize) as usize,
                        (w as isize - off_w).clamp(0, w as isize) as usize,
                    );
                    for r in r0..r1 {
                        let (z, y) = (r / h, r % h);
                        let out = &mut dst[(r - r0) * w..(r - r0 + 1) * w];
                        let sz = z as isize + a as isize - pd;
                        let sy = y as isize + b as isize - ph;
                        if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize || w_lo >= w_hi {
                            out.fill(0.0);
                            continue;
                        }
                        let src_row = (sz as usize * h + sy as usize) * w;
                        out[..w_lo].fill(0.0);
                        out[w_hi..].fill(0.0);
                        let s0 = (src_row as isize + w_lo as isize + off_w) as usize;
                        out[w_lo..w_hi].copy_from_slice(&xc[s0..s0 + (w_hi - w_lo)]);
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx`.
fn col2im_add(col: &[f64], g: &ConvGeom, r0: usize, r1: usize, dx: &mut [f64]) {
    let [d, h, w] = g.size;
    let [kd, kh, kw] = g.kernel;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let p = g.positions();
    let pc = (r1 - r0) * w;
    let mut row = 0;
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * p..(ci + 1) * p];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let src = &col[row * pc..(row + 1) * pc];
                    let off_w = c as isize - pw;
                    let (w_lo, w_hi) = (
                        (-off_w).clamp(0, w as isize) as usize,
                        (w as isize - off_w).clamp(0, w as isize) as usize,
                    );
                    for r in r0..r1 {
                        let (z, y) = (r / h, r % h);
                        let sz = z as isize + a as isize - pd;
                        let sy = y as isize + b as isize - ph;
                        if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize || w_lo >= w_hi {
                            continue;
                        }
                        let cur = &src[(r - r0) * w..(r - r0 + 1) * w];
                        let d0 = ((sz as usize * h + sy as usize) * w) as isize + w_lo as isize + off_w;
                        let dst = &mut dxc[d0 as usize..d0 as usize + (w_hi - w_lo)];
                        for (o, i) in dst.iter_mut().zip(&cur[w_lo..w_hi]) {
                            *o += i;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `y = W ⋆ x + b`. `w` is `[Cout, Cin, kd, kh, kw]`, `y` is overwritten.
pub fn conv_forward(x: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom, y: &mut [f64]) {
    let p = g.positions();
    let k = g.patch_len();
    let w = g.size[2];
    let rows = g.size[0] * g.size[1];
    debug_assert_eq!(x.len(), g.n * g.cin * p);
    debug_assert_eq!(y.len(), g.n * g.cout * p);
    debug_assert_eq!(weight.len(), g.cout * k);
    let chunk = rows_per_chunk(g);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * chunk * w] };
    for n in 0..g.n {
        let xn = &x[n * g.cin * p..(n + 1) * g.cin * p];
        let yn = &mut y[n * g.cout * p..(n + 1) * g.cout * p];
        if g.is_pointwise() {
            // SAFETY: Y[Cout, P] = W[Cout, Cin] · X[Cin, P].
            unsafe {
                dgemm(
                    g.cout, k, p, 1.0,
                    weight.as_ptr(), k as isize, 1,
                    xn.as_ptr(), p as isize, 1,
                    0.0,
                    yn.as_mut_ptr(), p as isize, 1,
                );
            }
        } else {
            for r0 in (0..rows).step_by(chunk) {
                let r1 = (r0 + chunk).min(rows);
                let pc = (r1 - r0) * w;
                im2col(xn, g, r0, r1, &mut col);
                // SAFETY: Y[:, r0·W..r1·W] (row stride P) = W[Cout, K] · col[K, pc].
                unsafe {
                    dgemm(
                        g.cout, k, pc, 1.0,
                        weight.as_ptr(), k as isize, 1,
                        col.as_ptr(), pc as isize, 1,
                        0.0,
                        yn.as_mut_ptr().add(r0 * w), p as isize, 1,
                    );
                }
            }
        }
        for (co, row) in yn.chunks_exact_mut(p).enumerate() {
            let bv = bias[co];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Accumulates weight/bias gradients into `dw`/`db` and, when requested,
/// writes the input gradient into `dx` (overwritten).
pub fn conv_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let p = g.positions();
    let k = g.patch_len();
    let w = g.size[2];
    let rows = g.size[0] * g.size[1];
    let chunk = rows_per_chunk(g);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * chunk * w] };
    let mut dcol = if dx.is_some() && !g.is_pointwise() { vec![0.0; k * chunk * w] } else { Vec::new() };
    if let Some(dx) = dx.as_deref_mut() {
        dx.fill(0.0);
    }
    for n in 0..g.n {
        let xn = &x[n * g.cin * p..(n + 1) * g.cin * p];
        let dyn_ = &dy[n * g.cout * p..(n + 1) * g.cout * p];
        for (co, row) in dyn_.chunks_exact(p).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
        if g.is_pointwise() {
            // SAFETY: dW[Cout, Cin] += dY[Cout, P] · Xᵀ[P, Cin].
            unsafe {
                dgemm(
                    g.cout, p, k, 1.0,
                    dyn_.as_ptr(), p as isize, 1,
                    xn.as_ptr(), 1, p as isize,
                    1.0,
                    dw.as_mut_ptr(), k as isize, 1,
                );
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxn = &mut dx[n * g.cin * p..(n + 1) * g.cin * p];
                // SAFETY: dX[Cin, P] = Wᵀ[Cin, Cout] · dY[Cout, P].
                unsafe {
                    dgemm(
                        g.cin, g.cout, p, 1.0,
                        weight.as_ptr(), 1, k as isize,
                        dyn_.as_ptr(), p as isize, 1,
                        0.0,
                        dxn.as_mut_ptr(), p as isize, 1,
                    );
                }
            }
            continue;
        }
        for r0 in (0..rows).step_by(chunk) {
            let r1 = (r0 + chunk).min(rows);
            let pc = (r1 - r0) * w;
            im2col(xn, g, r0, r1, &mut col);
            let dy_chunk = dyn_[r0 * w..].as_ptr();
            // SAFETY: dW[Cout, K] += dY[:, chunk] (row stride P) · colᵀ[pc, K].
            unsafe {
                dgemm(
                    g.cout, pc, k, 1.0,
                    dy_chunk, p as isize, 1,
                    col.as_ptr(), 1, pc as isize,
                    1.0,
                    dw.as_mut_ptr(), k as isize, 1,
                );
            }
            if let Some(dx) = dx.as_deref_mut() {
                // SAFETY: dcol[K, pc] = Wᵀ[K, Cout] · dY[:, chunk].
                unsafe {
                    dgemm(
                        k, g.cout, pc, 1.0,
                        weight.as_ptr(), 1, k as isize,
                        dy_chunk, p as isize, 1,
                        0.0,
                        dcol.as_mut_ptr(), pc as isize, 1,
                    );
                }
                col2im_add(&dcol, g, r0, r1, &mut dx[n * g.cin * p..(n + 1) * g.cin * p]);
            }
        }
    }
}

/// Input gradient only, for layers with frozen weights. `dx` is overwritten.
pub fn conv_input_backward(weight: &[f64], dy: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.positions();
    let k = g.patch_len();
    let w = g.size[2];
    let rows = g.size[0] * g.size[1];
    let chunk = if g.is_pointwise() { rows } else { rows_per_chunk(g) };
    let mut dcol = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * chunk * w] };
    dx.fill(0.0);
    for n in 0..g.n {
        let dyn_ = &dy[n * g.cout * p..(n + 1) * g.cout * p];
        let dxn = &mut dx[n * g.cin * p..(n + 1) * g.cin * p];
        if g.is_pointwise() {
            // SAFETY: dX[Cin, P] = Wᵀ[Cin, Cout] · dY[Cout, P].
            unsafe {
                dgemm(
                    g.cin, g.cout, p, 1.0,
                    weight.as_ptr(), 1, k as isize,
                    dyn_.as_ptr(), p as isize, 1,
                    0.0,
                    dxn.as_mut_ptr(), p as isize, 1,
                );
            }
            continue;
        }
        for r0 in (0..rows).step_by(chunk) {
            let r1 = (r0 + chunk).min(rows);
            let pc = (r1 - r0) * w;
            // SAFETY: dcol[K, pc] = Wᵀ[K, Cout] · dY[:, chunk].
            unsafe {
                dgemm(
                    k, g.cout, pc, 1.0,
                    weight.as_ptr(), 1, k as isize,
                    dyn_[r0 * w..].as_ptr(), p as isize, 1,
                    0.0,
                    dcol.as_mut_ptr(), pc as isize, 1,
                );
            }
            col2im_add(&dcol, g, r0, r1, dxn);
        }
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Masks `dy` in place by the post-activation output `y`.
pub fn relu_backward_inplace(y: &[f64], dy: &mut [f64]) {
    for (g, &o) in dy.iter_mut().zip(y) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Non-overlapping max pooling with window = stride = `win` per axis.
/// Returns the pooled tensor and, per output, the flat input offset of the
/// maximum (within its channel plane).
pub fn maxpool_forward(x: &[f64], nc: usize, size: [usize; 3], win: [usize; 3]) -> (Vec<f64>, Vec<u32>) {
    let [d, h, w] = size;
    let [od, oh, ow] = [d / win[0], h / win[1], w / win[2]];
    let p_in = d * h * w;
    let p_out = od * oh * ow;
    let mut y = vec![0.0; nc * p_out];
    let mut arg = vec![0u32; nc * p_out];
    for c in 0..nc {
        let xc = &x[c * p_in..(c + 1) * p_in];
        for z in 0..od {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for a in 0..win[0] {
                        for b in 0..win[1] {
                            let row = ((z * win[0] + a) * h + yy * win[1] + b) * w + xx * win[2];
                            for e in 0..win[2] {
                                let v = xc[row + e];
                                if v > best {
                                    best = v;
                                    best_i = row + e;
                                }
                            }
                        }
                    }
                    let o = c * p_out + (z * oh + yy) * ow + xx;
                    y[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward(dy: &[f64], arg: &[u32], nc: usize, in_positions: usize) -> Vec<f64> {
    let p_out = dy.len() / nc;
    let mut dx = vec![0.0; nc * in_positions];
    for c in 0..nc {
        for o in 0..p_out {
            dx[c * in_positions + arg[c * p_out + o] as usize] += dy[c * p_out + o];
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel normalization state saved for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Batch statistics were used (training mode).
    pub batch_stats: bool,
    /// Batch mean and unbiased variance, for running-average updates.
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

/// Batch normalization over `(N, spatial)` per channel, in place.
///
/// With `running = Some((mean, var))` the stored statistics are used
/// (evaluation); otherwise batch statistics are computed.
pub fn batchnorm_forward(
    x: &mut [f64],
    n: usize,
    c: usize,
    p: usize,
    gamma: &[f64],
    beta: &[f64],
    running: Option<(&[f64], &[f64])>,
) -> BnCache {
    let m = (n * p) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let mut var_unbiased = vec![0.0; c];
    match running {
        Some((rm, rv)) => {
            mean.copy_from_slice(rm);
            var.copy_from_slice(rv);
            var_unbiased.copy_from_slice(rv);
        }
        None => {
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += x[(b * c + ch) * p..(b * c + ch + 1) * p].iter().sum::<f64>();
                }
                let mu = s / m;
                let mut ss = 0.0;
                for b in 0..n {
                    ss += x[(b * c + ch) * p..(b * c + ch + 1) * p]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = ss / m;
                var_unbiased[ch] = if m > 1.0 { ss / (m - 1.0) } else { 0.0 };
            }
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * p..(b * c + ch + 1) * p;
            for (xv, xh) in x[r.clone()].iter_mut().zip(&mut xhat[r]) {
                let h = (*xv - mean[ch]) * inv_std[ch];
                *xh = h;
                *xv = gamma[ch] * h + beta[ch];
            }
        }
    }
    BnCache {
        xhat,
        inv_std,
        batch_stats: running.is_none(),
        mean,
        var_unbiased,
    }
}

/// Writes `dx` over `dy` in place and accumulates `dgamma`/`dbeta`.
pub fn batchnorm_backward(
    dy: &mut [f64],
    cache: &BnCache,
    n: usize,
    c: usize,
    p: usize,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let m = (n * p) as f64;
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            let r = (b * c + ch) * p..(b * c + ch + 1) * p;
            for (g, xh) in dy[r.clone()].iter().zip(&cache.xhat[r]) {
                sum_dy += g;
                sum_dy_xhat += g * xh;
            }
        }
        dgamma[ch] += sum_dy_xhat;
        dbeta[ch] += sum_dy;
        let k = gamma[ch] * cache.inv_std[ch];
        for b in 0..n {
            let r = (b * c + ch) * p..(b * c + ch + 1) * p;
            if cache.batch_stats {
                let mean_dy = sum_dy / m;
                let mean_dy_xhat = sum_dy_xhat / m;
                for (g, xh) in dy[r.clone()].iter_mut().zip(&cache.xhat[r]) {
                    *g = k * (*g - mean_dy - xh * mean_dy_xhat);
                }
            } else {
                dy[r].iter_mut().for_each(|g| *g *= k);
            }
        }
    }
}

/// Linear ×2 upsampling along one axis of a buffer viewed as
/// `[outer, len, inner]` (align-corners false, edge clamped).
fn upsample_axis(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; outer * 2 * len * inner];
    for o in 0..outer {
        let xs = &x[o * len * inner..(o + 1) * len * inner];
        let ys = &mut y[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        for j in 0..len {
            let prev = j.saturating_sub(1);
            let next = (j + 1).min(len - 1);
            let cur = &xs[j * inner..(j + 1) * inner];
            let pv = &xs[prev * inner..(prev + 1) * inner];
            let nx = &xs[next * inner..(next + 1) * inner];
            // output 2j sits at j - 0.25, output 2j+1 at j + 0.25
            for i in 0..inner {
                ys[(2 * j) * inner + i] = 0.75 * cur[i] + 0.25 * pv[i];
                ys[(2 * j + 1) * inner + i] = 0.75 * cur[i] + 0.25 * nx[i];
            }
        }
    }
    y
}

fn upsample_axis_adjoint(dy: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut dx = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let gs = &dy[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        let xs = &mut dx[o * len * inner..(o + 1) * len * inner];
        for j in 0..len {
            let prev = j.saturating_sub(1);
            let next = (j + 1).min(len - 1);
            for i in 0..inner {
                let g0 = gs[(2 * j) * inner + i];
                let g1 = gs[(2 * j + 1) * inner + i];
                xs[j * inner + i] += 0.75 * (g0 + g1);
                xs[prev * inner + i] += 0.25 * g0;
                xs[next * inner + i] += 0.25 * g1;
            }
        }
    }
    dx
}

/// Trilinear ×2 upsampling of `[NC, D, H, W]` (align-corners false).
pub fn upsample2_forward(x: &[f64], nc: usize, size: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = size;
    let t = upsample_axis(x, nc * d * h, w, 1);
    let t = upsample_axis(&t, nc * d, h, 2 * w);
    upsample_axis(&t, nc, d, 4 * h * w)
}

/// Adjoint of [`upsample2_forward`]; `size` is the input (coarse) size.
pub fn upsample2_backward(dy: &[f64], nc: usize, size: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = size;
    let t = upsample_axis_adjoint(dy, nc, d, 4 * h * w);
    let t = upsample_axis_adjoint(&t, nc * d, h, 2 * w);
    upsample_axis_adjoint(&t, nc * d * h, w, 1)
}

/// Concatenates `[N, Ca, P]` and `[N, Cb, P]` along channels.
pub fn concat_channels(a: &[f64], ca: usize, b: &[f64], cb: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (ca + cb) * p);
    for i in 0..n {
        out.extend_from_slice(&a[i * ca * p..(i + 1) * ca * p]);
        out.extend_from_slice(&b[i * cb * p..(i + 1) * cb * p]);
    }
    out
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(g: &[f64], ca: usize, cb: usize, n: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::with_capacity(n * ca * p);
    let mut b = Vec::with_capacity(n * cb * p);
    for i in 0..n {
        let base = i * (ca + cb) * p;
        a.extend_from_slice(&g[base..base + ca * p]);
        b.extend_from_slice(&g[base + ca * p..base + (ca + cb) * p]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    /// Direct nested-loop convolution, the reference for the GEMM path.
    fn conv_naive(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let [d, h, wd] = g.size;
        let [kd, kh, kw] = g.kernel;
        let p = g.positions();
        let mut y = vec![0.0; g.n * g.cout * p];
        for n in 0..g.n {
            for co in 0..g.cout {
                for z in 0..d {
                    for yy in 0..h {
                        for xx in 0..wd {
                            let mut acc = b[co];
                            for ci in 0..g.cin {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for c in 0..kw {
                                            let sz = z as isize + a as isize - (kd / 2) as isize;
                                            let sy = yy as isize + bb as isize - (kh / 2) as isize;
                                            let sx = xx as isize + c as isize - (kw / 2) as isize;
                                            if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= wd as isize {
                                                continue;
                                            }
                                            let xi = ((n * g.cin + ci) * d + sz as usize) * h * wd + sy as usize * wd + sx as usize;
                                            let wi = (((co * g.cin + ci) * kd + a) * kh + bb) * kw + c;
                                            acc += w[wi] * x[xi];
                                        }
                                    }
                                }
                            }
                            y[((n * g.cout + co) * d + z) * h * wd + yy * wd + xx] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (kernel, size) in [([3, 3, 3], [4, 5, 6]), ([1, 3, 3], [1, 6, 5]), ([1, 1, 1], [3, 3, 2])] {
            let g = ConvGeom { n: 2, cin: 3, cout: 4, size, kernel };
            let x = rand_vec(g.n * g.cin * g.positions(), 1);
            let w = rand_vec(g.cout * g.patch_len(), 2);
            let b = rand_vec(g.cout, 3);
            let mut y = vec![0.0; g.n * g.cout * g.positions()];
            conv_forward(&x, &w, &b, &g, &mut y);
            let r = conv_naive(&x, &w, &b, &g);
            for (a, e) in y.iter().zip(&r) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let g = ConvGeom { n: 2, cin: 2, cout: 3, size: [3, 4, 5], kernel: [3, 3, 3] };
        let x = rand_vec(g.n * g.cin * g.positions(), 4);
        let w = rand_vec(g.cout * g.patch_len(), 5);
        let b = rand_vec(g.cout, 6);
        let r = rand_vec(g.n * g.cout * g.positions(), 7);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| {
            let mut y = vec![0.0; r.len()];
            conv_forward(x, w, b, &g, &mut y);
            y.iter().zip(&r).map(|(a, c)| a * c).sum::<f64>()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        let mut dx = vec![0.0; x.len()];
        conv_backward(&x, &w, &r, &g, &mut dw, &mut db, Some(&mut dx));
        let eps = 1e-6;
        for i in (0..w.len()).step_by(7) {
            let mut wp = w.clone();
            wp[i] += eps;
            let mut wm = w.clone();
            wm[i] -= eps;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * eps);
            assert!((fd - dw[i]).abs() < 1e-6, "dw[{i}]");
        }
        for i in (0..x.len()).step_by(5) {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-6, "dx[{i}]");
        }
        let fd_b = {
            let mut bp = b.clone();
            bp[1] += eps;
            let mut bm = b.clone();
            bm[1] -= eps;
            (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * eps)
        };
        assert!((fd_b - db[1]).abs() < 1e-6);
    }

    #[test]
    fn upsample_preserves_constants_and_is_adjoint() {
        let size = [2, 3, 4];
        let x = vec![2.5; 2 * 24];
        assert!(upsample2_forward(&x, 2, size).iter().all(|v| (v - 2.5).abs() < 1e-12));
        let x = rand_vec(2 * 24, 8);
        let gy = rand_vec(2 * 24 * 8, 9);
        let y = upsample2_forward(&x, 2, size);
        let gx = upsample2_backward(&gy, 2, size);
        let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_picks_block_maximum_and_routes_gradient() {
        let x: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64).collect();
        let (y, arg) = maxpool_forward(&x, 1, [2, 2, 4], [2, 2, 2]);
        assert_eq!(y.len(), 2);
        assert_eq!(y[0], [0, 1, 4, 5, 8, 9, 12, 13].iter().map(|&i| x[i]).fold(f64::MIN, f64::max));
        let dx = maxpool_backward(&[1.0, 2.0], &arg, 1, 16);
        assert_eq!(dx.iter().sum::<f64>(), 3.0);
        assert_eq!(dx[arg[1] as usize], 2.0);
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let (n, c, p) = (2, 3, 5);
        let x = rand_vec(n * c * p, 10);
        let gamma = vec![1.3, 0.7, -0.4];
        let beta = vec![0.1, -0.2, 0.3];
        let r = rand_vec(n * c * p, 11);
        let loss = |x: &[f64], gamma: &[f64]| {
            let mut y = x.to_vec();
            batchnorm_forward(&mut y, n, c, p, gamma, &beta, None);
            y.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut y = x.clone();
        let cache = batchnorm_forward(&mut y, n, c, p, &gamma, &beta, None);
        let mut dx = r.clone();
        let mut dg = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        batchnorm_backward(&mut dx, &cache, n, c, p, &gamma, &mut dg, &mut dbeta);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (loss(&xp, &gamma) - loss(&xm, &gamma)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-6, "dx[{i}] {fd} vs {}", dx[i]);
        }
        for ch in 0..c {
            let mut gp = gamma.clone();
            gp[ch] += eps;
            let mut gm = gamma.clone();
            gm[ch] -= eps;
            let fd = (loss(&x, &gp) - loss(&x, &gm)) / (2.0 * eps);
            assert!((fd - dg[ch]).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let a = rand_vec(2 * 3 * 4, 1);
        let b = rand_vec(2 * 1 * 4, 2);
        let cat = concat_channels(&a, 3, &b, 1, 2, 4);
        let (a2, b2) = split_channels(&cat, 3, 1, 2, 4);
        assert_eq!((a, b), (a2, b2));
    }
}
