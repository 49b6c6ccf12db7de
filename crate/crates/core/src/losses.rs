//! Composite reconstruction loss and the matching evaluation metrics.
//!
//! `total = a1·MAE + a2·(1 − SSIM) + a3·perceptual`. Every term has an
//! analytic gradient with respect to the prediction; the evaluation code
//! calls the same functions.
//!
//! Tensors are `[N, C, D, H, W]`; the `N·C` volumes are scored separately
//! and averaged (all volumes in a batch share a shape, so this equals the
//! pooled mean over windows / voxels / slices).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{FeatureExtractor, IMAGENET_MEAN, IMAGENET_STD};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            a1: 0.2,
            a2: 0.1,
            a3: 0.7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.a1, self.a2, self.a3].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Parameter(format!("loss weights must be finite and ≥ 0, got {self:?}")));
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            a1: self.a1 * s,
            a2: self.a2 * s,
            a3: self.a3 * s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mae: f64,
    pub one_minus_ssim: f64,
    pub perceptual: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(w: &LossWeights, mae: f64, one_minus_ssim: f64, perceptual: f64) -> Self {
        Self {
            mae,
            one_minus_ssim,
            perceptual,
            total: w.a1 * mae + w.a2 * one_minus_ssim + w.a3 * perceptual,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.mae, self.one_minus_ssim, self.perceptual, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    /// Edge of the cubic uniform window.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty tensors".into()));
    }
    Ok(())
}

/// Splits a rank-5 shape into (number of volumes, spatial dims).
fn volumes(t: &Tensor) -> Result<(usize, [usize; 3])> {
    if t.shape().len() != 5 {
        return Err(Error::Shape(format!("expected [N, C, D, H, W], got {:?}", t.shape())));
    }
    let [n, c, d, h, w] = t.dims5();
    Ok((n * c, [d, h, w]))
}

// ---------------------------------------------------------------------------
// MAE

pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// MAE and its gradient with respect to `a`.
pub fn mae_grad(a: &Tensor, b: &Tensor) -> Result<(f64, Vec<f64>)> {
    let value = mae(a, b)?;
    let n = a.len() as f64;
    let g = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x - y;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((value, g))
}

// ---------------------------------------------------------------------------
// SSIM

/// Windowed sums along the middle axis of `[outer, len, inner]`, valid positions only.
fn box_axis(x: &[f64], outer: usize, len: usize, inner: usize, k: usize) -> Vec<f64> {
    let out_len = len + 1 - k;
    let mut y = vec![0.0; outer * out_len * inner];
    for o in 0..outer {
        let xs = &x[o * len * inner..(o + 1) * len * inner];
        let ys = &mut y[o * out_len * inner..(o + 1) * out_len * inner];
        for j in 0..out_len {
            let dst = &mut ys[j * inner..(j + 1) * inner];
            for t in j..j + k {
                dst.iter_mut().zip(&xs[t * inner..(t + 1) * inner]).for_each(|(a, b)| *a += b);
            }
        }
    }
    y
}

/// Adjoint of [`box_axis`]; `len` is the full (input) length.
fn box_axis_adjoint(g: &[f64], outer: usize, len: usize, inner: usize, k: usize) -> Vec<f64> {
    let out_len = len + 1 - k;
    let mut x = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let gs = &g[o * out_len * inner..(o + 1) * out_len * inner];
        let xs = &mut x[o * len * inner..(o + 1) * len * inner];
        for j in 0..out_len {
            let src = &gs[j * inner..(j + 1) * inner];
            for t in j..j + k {
                xs[t * inner..(t + 1) * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
    }
    x
}

fn box3(x: &[f64], [d, h, w]: [usize; 3], k: usize) -> Vec<f64> {
    let t = box_axis(x, d * h, w, 1, k);
    let wv = w + 1 - k;
    let t = box_axis(&t, d, h, wv, k);
    let hv = h + 1 - k;
    box_axis(&t, 1, d, hv * wv, k)
}

fn box3_adjoint(g: &[f64], [d, h, w]: [usize; 3], k: usize) -> Vec<f64> {
    let (hv, wv) = (h + 1 - k, w + 1 - k);
    let t = box_axis_adjoint(g, 1, d, hv * wv, k);
    let t = box_axis_adjoint(&t, d, h, wv, k);
    box_axis_adjoint(&t, d * h, w, 1, k)
}

/// SSIM of one volume pair; with `want_grad`, also `∂SSIM/∂x`.
fn ssim_volume(x: &[f64], y: &[f64], size: [usize; 3], p: &SsimParams, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let k = p.window;
    let kk = (k * k * k) as f64;
    let (c1, c2) = (p.c1(), p.c2());
    let sq = |v: &[f64]| v.iter().map(|a| a * a).collect::<Vec<_>>();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = box3(x, size, k);
    let my = box3(y, size, k);
    let exx = box3(&sq(x), size, k);
    let eyy = box3(&sq(y), size, k);
    let exy = box3(&xy, size, k);
    let nwin = mx.len();
    let mut total = 0.0;
    let (mut g_mx, mut g_exx, mut g_exy) = if want_grad {
        (vec![0.0; nwin], vec![0.0; nwin], vec![0.0; nwin])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..nwin {
        let ux = mx[i] / kk;
        let uy = my[i] / kk;
        let vx = exx[i] / kk - ux * ux;
        let vy = eyy[i] / kk - uy * uy;
        let cxy = exy[i] / kk - ux * uy;
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * cxy + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = vx + vy + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let den = b1 * b2;
            // derivatives with respect to the window means of x, x² and x·y
            g_mx[i] = (2.0 * uy * a2 - 2.0 * uy * a1) / den - s * (2.0 * ux / b1 - 2.0 * ux / b2);
            g_exx[i] = -s / b2;
            g_exy[i] = 2.0 * a1 / den;
        }
    }
    let value = total / nwin as f64;
    if !want_grad {
        return (value, None);
    }
    let scale = 1.0 / (nwin as f64 * kk);
    let a_mx = box3_adjoint(&g_mx, size, k);
    let a_exx = box3_adjoint(&g_exx, size, k);
    let a_exy = box3_adjoint(&g_exy, size, k);
    let grad = (0..x.len())
        .map(|v| scale * (a_mx[v] + 2.0 * x[v] * a_exx[v] + y[v] * a_exy[v]))
        .collect();
    (value, Some(grad))
}

fn ssim_impl(a: &Tensor, b: &Tensor, p: &SsimParams, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    same_shape(a, b)?;
    let (nv, size) = volumes(a)?;
    if size.iter().any(|&s| s < p.window) {
        return Err(Error::Parameter(format!(
            "volume dims {size:?} are smaller than the {}³ SSIM window",
            p.window
        )));
    }
    let vol = size.iter().product::<usize>();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Vec::with_capacity(a.len()));
    for v in 0..nv {
        let r = v * vol..(v + 1) * vol;
        let (s, g) = ssim_volume(&a.data()[r.clone()], &b.data()[r], size, p, want_grad);
        total += s;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.extend(g.into_iter().map(|x| x / nv as f64));
        }
    }
    Ok((total / nv as f64, grad))
}

/// Mean SSIM over valid 7³ window positions (default parameters).
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

pub fn ssim_with(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<f64> {
    ssim_impl(a, b, p, false).map(|(s, _)| s)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_grad(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<(f64, Vec<f64>)> {
    ssim_impl(a, b, p, true).map(|(s, g)| (s, g.expect("gradient requested")))
}

// ---------------------------------------------------------------------------
// perceptual

/// Axial slices of every volume as normalized 3-channel images `[S, 3, H, W]`.
fn slice_images(t: &Tensor) -> Result<(Vec<f64>, usize, usize, usize)> {
    let (nv, [d, h, w]) = volumes(t)?;
    let plane = h * w;
    let s = nv * d;
    let mut img = Vec::with_capacity(s * 3 * plane);
    for sl in t.data().chunks_exact(plane) {
        for c in 0..3 {
            img.extend(sl.iter().map(|x| (x - IMAGENET_MEAN[c]) / IMAGENET_STD[c]));
        }
    }
    Ok((img, s, h, w))
}

fn perceptual_impl(a: &Tensor, b: &Tensor, ext: &FeatureExtractor, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    same_shape(a, b)?;
    let (ia, s, h, w) = slice_images(a)?;
    let (ib, ..) = slice_images(b)?;
    let fb = ext.features(&ib, s, h, w)?;
    let (fa, trace) = if want_grad {
        let (f, t) = ext.features_traced(&ia, s, h, w)?;
        (f, Some(t))
    } else {
        (ext.features(&ia, s, h, w)?, None)
    };
    let n = fa.len() as f64;
    let value = fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    let Some(trace) = trace else {
        return Ok((value, None));
    };
    let gf: Vec<f64> = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| {
            let d = x - y;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    let gi = ext.input_vjp(&trace, &gf);
    let plane = h * w;
    let mut grad = Vec::with_capacity(a.len());
    for img in gi.chunks_exact(3 * plane) {
        grad.extend((0..plane).map(|i| (0..3).map(|c| img[c * plane + i] / IMAGENET_STD[c]).sum::<f64>()));
    }
    Ok((value, Some(grad)))
}

/// Mean over axial slices of the MAE between extractor feature maps.
pub fn perceptual_distance(a: &Tensor, b: &Tensor, ext: &FeatureExtractor) -> Result<f64> {
    perceptual_impl(a, b, ext, false).map(|(v, _)| v)
}

/// Perceptual distance and its gradient with respect to `a`.
pub fn perceptual_grad(a: &Tensor, b: &Tensor, ext: &FeatureExtractor) -> Result<(f64, Vec<f64>)> {
    perceptual_impl(a, b, ext, true).map(|(v, g)| (v, g.expect("gradient requested")))
}

// ---------------------------------------------------------------------------
// composite

pub fn composite_loss(pred: &Tensor, target: &Tensor, w: &LossWeights, ext: &FeatureExtractor) -> Result<LossBreakdown> {
    w.validate()?;
    let m = mae(pred, target)?;
    let s = ssim(pred, target)?;
    let p = perceptual_distance(pred, target, ext)?;
    Ok(LossBreakdown::new(w, m, 1.0 - s, p))
}

/// Loss breakdown and `∂total/∂pred`. Terms with zero weight are still
/// evaluated but not differentiated.
pub fn composite_loss_grad(
    pred: &Tensor,
    target: &Tensor,
    w: &LossWeights,
    ext: &FeatureExtractor,
) -> Result<(LossBreakdown, Tensor)> {
    w.validate()?;
    let mut grad = vec![0.0; pred.len()];
    let mut add = |g: &[f64], s: f64| grad.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);

    let (m, gm) = mae_grad(pred, target)?;
    add(&gm, w.a1);
    let s = if w.a2 != 0.0 {
        let (s, gs) = ssim_grad(pred, target, &SsimParams::default())?;
        add(&gs, -w.a2);
        s
    } else {
        ssim(pred, target)?
    };
    let p = if w.a3 != 0.0 {
        let (p, gp) = perceptual_grad(pred, target, ext)?;
        add(&gp, w.a3);
        p
    } else {
        perceptual_distance(pred, target, ext)?
    };
    Ok((LossBreakdown::new(w, m, 1.0 - s, p), Tensor::new(pred.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: [usize; 5], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen::<f64>()).collect()).unwrap()
    }

    fn ext() -> FeatureExtractor {
        FeatureExtractor::seeded_random(3, 16).unwrap()
    }

    #[test]
    fn mae_examples() {
        let a = Tensor::new(vec![2], vec![0.0, 0.5]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 0.5]).unwrap();
        assert_eq!(mae(&a, &b).unwrap(), 0.5);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let z = Tensor::zeros(&[1, 1, 8, 8, 8]);
        let o = Tensor::full(&[1, 1, 8, 8, 8], 1.0);
        assert_eq!(mae(&z, &o).unwrap(), 1.0);
        assert!(matches!(mae(&a, &z), Err(Error::Shape(_))));
    }

    /// Direct per-window SSIM with explicit loops, no separable sums.
    fn ssim_oracle(a: &[f64], b: &[f64], [d, h, w]: [usize; 3]) -> f64 {
        let (k, c1, c2) = (7, 1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for z in 0..=d - k {
            for y in 0..=h - k {
                for x in 0..=w - k {
                    let mut vals = Vec::new();
                    for i in 0..k {
                        for j in 0..k {
                            for l in 0..k {
                                let idx = ((z + i) * h + y + j) * w + x + l;
                                vals.push((a[idx], b[idx]));
                            }
                        }
                    }
                    let n = vals.len() as f64;
                    let ma = vals.iter().map(|v| v.0).sum::<f64>() / n;
                    let mb = vals.iter().map(|v| v.1).sum::<f64>() / n;
                    let va = vals.iter().map(|v| (v.0 - ma).powi(2)).sum::<f64>() / n;
                    let vb = vals.iter().map(|v| (v.1 - mb).powi(2)).sum::<f64>() / n;
                    let cov = vals.iter().map(|v| (v.0 - ma) * (v.1 - mb)).sum::<f64>() / n;
                    total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_window_loop_oracle() {
        let a = rand_t([1, 1, 9, 10, 8], 1);
        let b = rand_t([1, 1, 9, 10, 8], 2);
        let got = ssim(&a, &b).unwrap();
        let want = ssim_oracle(a.data(), b.data(), [9, 10, 8]);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn ssim_identities() {
        let a = rand_t([2, 1, 8, 8, 8], 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = rand_t([2, 1, 8, 8, 8], 4);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let z = Tensor::zeros(&[1, 1, 8, 8, 8]);
        let o = Tensor::full(&[1, 1, 8, 8, 8], 1.0);
        let closed = 1e-4 / (1.0 + 1e-4);
        assert!((ssim(&z, &o).unwrap() - closed).abs() < 1e-15);
        assert!((closed - 9.999e-5).abs() < 1e-8);
        let small = Tensor::zeros(&[1, 1, 6, 8, 8]);
        assert!(matches!(ssim(&small, &small), Err(Error::Parameter(_))));
    }

    #[test]
    fn ssim_constant_shift_is_pure_luminance() {
        let a = rand_t([1, 1, 8, 8, 9], 5);
        let mut b = a.clone();
        b.data_mut().iter_mut().for_each(|v| *v += 0.1);
        let [d, h, w] = [8, 8, 9];
        let c1 = 1e-4;
        let mut expect = 0.0;
        let mut count = 0;
        for z in 0..=d - 7 {
            for y in 0..=h - 7 {
                for x in 0..=w - 7 {
                    let mut s = 0.0;
                    for i in 0..7 {
                        for j in 0..7 {
                            for l in 0..7 {
                                s += a.data()[((z + i) * h + y + j) * w + x + l];
                            }
                        }
                    }
                    let mu = s / 343.0;
                    let nu = mu + 0.1;
                    expect += (2.0 * mu * nu + c1) / (mu * mu + nu * nu + c1);
                    count += 1;
                }
            }
        }
        expect /= count as f64;
        let got = ssim(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-10);
        assert!(got < 1.0);
    }

    fn fd_relative_error(f: impl Fn(&Tensor) -> f64, x: &Tensor, analytic: &[f64]) -> f64 {
        let eps = 1e-6;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
            num += (fd - analytic[i]).powi(2);
            den += fd.powi(2);
        }
        (num / den).sqrt()
    }

    #[test]
    fn term_gradients_match_finite_differences() {
        let a = rand_t([1, 1, 8, 8, 8], 6);
        let b = rand_t([1, 1, 8, 8, 8], 7);
        let e = ext();
        let (_, g) = mae_grad(&a, &b).unwrap();
        assert!(fd_relative_error(|x| mae(x, &b).unwrap(), &a, &g) < 1e-2);
        let (_, g) = ssim_grad(&a, &b, &SsimParams::default()).unwrap();
        assert!(fd_relative_error(|x| ssim(x, &b).unwrap(), &a, &g) < 1e-6);
        let (_, g) = perceptual_grad(&a, &b, &e).unwrap();
        assert!(fd_relative_error(|x| perceptual_distance(x, &b, &e).unwrap(), &a, &g) < 1e-2);
    }

    #[test]
    fn ssim_gradient_on_batches() {
        let a = rand_t([2, 1, 8, 9, 8], 8);
        let b = rand_t([2, 1, 8, 9, 8], 9);
        let (_, g) = ssim_grad(&a, &b, &SsimParams::default()).unwrap();
        assert!(fd_relative_error(|x| ssim(x, &b).unwrap(), &a, &g) < 1e-6);
    }

    #[test]
    fn composite_gradient_and_linearity() {
        let a = rand_t([1, 1, 8, 8, 8], 10);
        let b = rand_t([1, 1, 8, 8, 8], 11);
        let e = ext();
        let w = LossWeights::default();
        let (br, g) = composite_loss_grad(&a, &b, &w, &e).unwrap();
        assert_eq!(br, composite_loss(&a, &b, &w, &e).unwrap());
        assert!(fd_relative_error(|x| composite_loss(x, &b, &w, &e).unwrap().total, &a, g.data()) < 1e-2);
        let t2 = composite_loss(&a, &b, &w.scaled(2.0), &e).unwrap().total;
        assert!((t2 - 2.0 * br.total).abs() < 1e-9);
        let only_mae = composite_loss(&a, &b, &LossWeights { a1: 1.0, a2: 0.0, a3: 0.0 }, &e).unwrap();
        assert_eq!(only_mae.total, only_mae.mae);
        assert!(LossWeights { a1: -1.0, a2: 0.0, a3: 0.0 }.validate().is_err());
    }

    #[test]
    fn identical_inputs_have_zero_loss() {
        let a = rand_t([1, 1, 16, 16, 16], 12);
        let br = composite_loss(&a, &a, &LossWeights::default(), &ext()).unwrap();
        assert_eq!(br.mae, 0.0);
        assert_eq!(br.perceptual, 0.0);
        assert!(br.one_minus_ssim.abs() < 1e-12);
        assert!(br.total.abs() < 1e-12);
    }

    /// Slice-by-slice reference with direct convolution loops.
    fn perceptual_oracle(a: &Tensor, b: &Tensor, e: &FeatureExtractor) -> f64 {
        let [n, c, d, h, w] = a.dims5();
        let feats = |sl: &[f64]| -> Vec<f64> {
            let mut ch: Vec<Vec<f64>> = (0..3)
                .map(|k| sl.iter().map(|x| (x - IMAGENET_MEAN[k]) / IMAGENET_STD[k]).collect())
                .collect();
            let (mut hh, mut ww) = (h, w);
            let mut layers = e.conv_layers().iter();
            let plan = ["c", "c", "p", "c", "c", "p", "c", "c", "c", "p", "c", "c", "c"];
            for step in plan {
                if step == "p" {
                    let (oh, ow) = (hh / 2, ww / 2);
                    ch = ch
                        .iter()
                        .map(|m| {
                            let mut o = vec![0.0; oh * ow];
                            for y in 0..oh {
                                for x in 0..ow {
                                    o[y * ow + x] = [m[2 * y * ww + 2 * x], m[2 * y * ww + 2 * x + 1], m[(2 * y + 1) * ww + 2 * x], m[(2 * y + 1) * ww + 2 * x + 1]]
                                        .into_iter()
                                        .fold(f64::MIN, f64::max);
                                }
                            }
                            o
                        })
                        .collect();
                    hh = oh;
                    ww = ow;
                    continue;
                }
                let l = layers.next().unwrap();
                let mut out = vec![vec![0.0; hh * ww]; l.cout];
                for (co, o) in out.iter_mut().enumerate() {
                    for y in 0..hh {
                        for x in 0..ww {
                            let mut acc = l.bias[co];
                            for (ci, m) in ch.iter().enumerate() {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                        if sy < 0 || sx < 0 || sy >= hh as isize || sx >= ww as isize {
                                            continue;
                                        }
                                        acc += l.weight[((co * l.cin + ci) * 3 + ky) * 3 + kx] * m[sy as usize * ww + sx as usize];
                                    }
                                }
                            }
                            o[y * ww + x] = acc.max(0.0);
                        }
                    }
                }
                ch = out;
            }
            ch.concat()
        };
        let plane = h * w;
        let mut sum = 0.0;
        let mut slices = 0;
        for s in 0..n * c * d {
            let fa = feats(&a.data()[s * plane..(s + 1) * plane]);
            let fb = feats(&b.data()[s * plane..(s + 1) * plane]);
            sum += fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).sum::<f64>() / fa.len() as f64;
            slices += 1;
        }
        sum / slices as f64
    }

    #[test]
    fn perceptual_matches_slice_loop_oracle_and_is_symmetric() {
        let a = rand_t([1, 1, 3, 16, 8], 13);
        let b = rand_t([1, 1, 3, 16, 8], 14);
        let e = FeatureExtractor::seeded_random(4, 8).unwrap();
        let got = perceptual_distance(&a, &b, &e).unwrap();
        let want = perceptual_oracle(&a, &b, &e);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert_eq!(got, perceptual_distance(&b, &a, &e).unwrap());
    }

    #[test]
    fn constant_volumes_composite_closed_form() {
        let z = Tensor::zeros(&[1, 1, 8, 8, 8]);
        let o = Tensor::full(&[1, 1, 8, 8, 8], 1.0);
        let e = ext();
        let p = perceptual_oracle(&z, &o, &e);
        let br = composite_loss(&z, &o, &LossWeights::default(), &e).unwrap();
        let want = 0.2 * 1.0 + 0.1 * (1.0 - 1e-4 / (1.0 + 1e-4)) + 0.7 * p;
        assert!((br.total - want).abs() < 1e-9);
    }
}
