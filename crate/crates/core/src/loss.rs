//! Training objective: photometric L1, a structural-similarity perceptual
//! proxy, alpha-mask MSE and a scale regularizer, combined as
//! `λ₁·L1 + λp·perc + λα·alpha + λs·scale`.
//!
//! Every term returns its value together with the gradient with respect to
//! its image (or log-scale) input.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::imageio::ImageBuf;
use crate::raster::RenderOutput;
use crate::splat::{max_log_scale, min_log_scale, SplatScene};
use crate::{Error, Real, Result};

/// Smallest image side accepted by [`perceptual_loss`].
pub const PERCEPTUAL_MIN_SIZE: usize = 32;
const SSIM_SCALES: usize = 3;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Perceptual {
    /// `1 − mean SSIM` over three dyadic scales.
    #[default]
    MsSsim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_perc: f64,
    pub lambda_alpha: f64,
    pub lambda_scale: f64,
    pub perceptual: Perceptual,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 1.0,
            lambda_perc: 0.5,
            lambda_alpha: 1.0,
            lambda_scale: 0.01,
            perceptual: Perceptual::MsSsim,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_l1: 0.0,
            lambda_perc: 0.0,
            lambda_alpha: 0.0,
            lambda_scale: 0.0,
            perceptual: Perceptual::MsSsim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_l1,
            self.lambda_perc,
            self.lambda_alpha,
            self.lambda_scale,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "loss weights must be finite and >= 0: {all:?}"
            )))
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            lambda_l1: self.lambda_l1 * k,
            lambda_perc: self.lambda_perc * k,
            lambda_alpha: self.lambda_alpha * k,
            lambda_scale: self.lambda_scale * k,
            perceptual: self.perceptual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    #[serde(rename = "perc")]
    pub perceptual: f64,
    pub alpha: f64,
    pub scale: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l1, self.perceptual, self.alpha, self.scale, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean absolute difference. The subgradient at exact ties is 0.
pub fn l1_loss<T: Real>(pred: &ImageBuf<T>, gt: &ImageBuf<T>) -> Result<(T, ImageBuf<T>)> {
    pred.check_shape(gt)?;
    let n = T::lit(pred.data.len().max(1) as f64);
    let mut grad = ImageBuf::new(pred.width, pred.height, pred.channels);
    let mut sum = T::zero();
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&gt.data) {
        let d = *p - *t;
        sum += d.abs();
        *g = if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        };
    }
    Ok((sum / n, grad))
}

/// Mean squared error between rendered alpha and the foreground mask.
pub fn alpha_loss<T: Real>(
    pred_alpha: &ImageBuf<T>,
    gt_mask: &ImageBuf<T>,
) -> Result<(T, ImageBuf<T>)> {
    pred_alpha.check_shape(gt_mask)?;
    let n = T::lit(pred_alpha.data.len().max(1) as f64);
    let mut grad = ImageBuf::new(pred_alpha.width, pred_alpha.height, pred_alpha.channels);
    let mut sum = T::zero();
    for ((g, p), t) in grad
        .data
        .iter_mut()
        .zip(&pred_alpha.data)
        .zip(&gt_mask.data)
    {
        let d = *p - *t;
        sum += d * d;
        *g = T::lit(2.0) * d / n;
    }
    Ok((sum / n, grad))
}

/// `(1/K)·Σ [max(s)/min(s) − 1 + ‖s‖₁]` over actual scales `s = exp(log_scale)`.
///
/// The anisotropy ratio is evaluated as `(max − min)/max(min, 1e-8)` so an
/// isotropic Gaussian contributes exactly zero. Gradients are with respect to
/// the stored log-scales and vanish where the clamp is active.
pub fn scale_reg<T: Real>(scene: &SplatScene<T>) -> Result<(T, Vec<Vector3<T>>)> {
    if scene.is_empty() {
        return Err(Error::EmptyScene);
    }
    let k = T::lit(scene.len() as f64);
    let guard = T::lit(1e-8);
    let (lo, hi) = (min_log_scale::<T>(), max_log_scale::<T>());
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(scene.len());
    for g in &scene.gaussians {
        let s = g.scales();
        let (imax, imin) = (s.imax(), s.imin());
        let (smax, smin) = (s[imax], s[imin]);
        let den = smin.max(guard);
        total += (smax - smin) / den + s.x + s.y + s.z;
        let mut ds = Vector3::repeat(T::one());
        ds[imax] += T::one() / den;
        ds[imin] -= T::one() / den;
        if smin > guard {
            ds[imin] -= (smax - smin) / (den * den);
        }
        let mut d = Vector3::zeros();
        for i in 0..3 {
            if g.log_scale[i] > lo && g.log_scale[i] < hi {
                d[i] = ds[i] * s[i] / k;
            }
        }
        grads.push(d);
    }
    Ok((total / k, grads))
}

/// Normalized, border-truncated 1D Gaussian filter weights for a signal of
/// length `n`: `taps[i]` holds `(first index, weights)` for output `i`.
fn filter_taps<T: Real>(n: usize) -> Vec<(usize, Vec<T>)> {
    let r = SSIM_RADIUS as isize;
    let base: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    (0..n as isize)
        .map(|i| {
            let lo = (i - r).max(0);
            let hi = (i + r).min(n as isize - 1);
            let w: Vec<f64> = (lo..=hi).map(|j| base[(j - i + r) as usize]).collect();
            let sum: f64 = w.iter().sum();
            (lo as usize, w.iter().map(|v| T::lit(v / sum)).collect())
        })
        .collect()
}

/// Separable local weighted mean of a single-channel `w×h` plane.
struct Window<T: Real> {
    w: usize,
    h: usize,
    tx: Vec<(usize, Vec<T>)>,
    ty: Vec<(usize, Vec<T>)>,
}

impl<T: Real> Window<T> {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            tx: filter_taps(w),
            ty: filter_taps(h),
        }
    }

    fn apply(&self, src: &[T]) -> Vec<T> {
        let (w, h) = (self.w, self.h);
        let mut rows = vec![T::zero(); w * h];
        for y in 0..h {
            for (x, (j0, ws)) in self.tx.iter().enumerate() {
                let mut acc = T::zero();
                for (k, wk) in ws.iter().enumerate() {
                    acc += *wk * src[y * w + j0 + k];
                }
                rows[y * w + x] = acc;
            }
        }
        let mut out = vec![T::zero(); w * h];
        for (y, (j0, ws)) in self.ty.iter().enumerate() {
            for (k, wk) in ws.iter().enumerate() {
                let row = &rows[(j0 + k) * w..(j0 + k + 1) * w];
                for x in 0..w {
                    out[y * w + x] += *wk * row[x];
                }
            }
        }
        out
    }

    fn adjoint(&self, src: &[T]) -> Vec<T> {
        let (w, h) = (self.w, self.h);
        let mut cols = vec![T::zero(); w * h];
        for (y, (j0, ws)) in self.ty.iter().enumerate() {
            for (k, wk) in ws.iter().enumerate() {
                for x in 0..w {
                    cols[(j0 + k) * w + x] += *wk * src[y * w + x];
                }
            }
        }
        let mut out = vec![T::zero(); w * h];
        for y in 0..h {
            for (x, (j0, ws)) in self.tx.iter().enumerate() {
                let v = cols[y * w + x];
                for (k, wk) in ws.iter().enumerate() {
                    out[y * w + j0 + k] += *wk * v;
                }
            }
        }
        out
    }
}

/// Mean SSIM of two planes and, if `grad_scale` is given, `grad_scale·∂mean/∂x`.
fn ssim_plane<T: Real>(
    win: &Window<T>,
    x: &[T],
    y: &[T],
    grad_scale: Option<T>,
) -> (T, Option<Vec<T>>) {
    let n = x.len();
    let c1 = T::lit(SSIM_C1);
    let c2 = T::lit(SSIM_C2);
    let two = T::lit(2.0);
    let xx: Vec<T> = x.iter().map(|v| *v * *v).collect();
    let yy: Vec<T> = y.iter().map(|v| *v * *v).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(a, b)| *a * *b).collect();
    let (mx, my) = (win.apply(x), win.apply(y));
    let (ex2, ey2, exy) = (win.apply(&xx), win.apply(&yy), win.apply(&xy));
    let mut sum = T::zero();
    let want_grad = grad_scale.is_some();
    let (mut g_mu, mut g_ex2, mut g_exy) = if want_grad {
        (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    let c = grad_scale.unwrap_or(T::zero()) / T::lit(n as f64);
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let a1 = two * ux * uy + c1;
        let a2 = two * (exy[i] - ux * uy) + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = (ex2[i] - ux * ux) + (ey2[i] - uy * uy) + c2;
        let s = a1 * a2 / (b1 * b2);
        sum += s;
        if want_grad {
            let d_a1 = a2 / (b1 * b2);
            let d_a2 = a1 / (b1 * b2);
            let d_b1 = -s / b1;
            let d_b2 = -s / b2;
            g_mu[i] = c * (d_a1 * two * uy - d_a2 * two * uy + d_b1 * two * ux - d_b2 * two * ux);
            g_ex2[i] = c * d_b2;
            g_exy[i] = c * two * d_a2;
        }
    }
    let mean = sum / T::lit(n as f64);
    if !want_grad {
        return (mean, None);
    }
    let (a_mu, a_ex2, a_exy) = (win.adjoint(&g_mu), win.adjoint(&g_ex2), win.adjoint(&g_exy));
    let grad = (0..n)
        .map(|i| a_mu[i] + two * x[i] * a_ex2[i] + y[i] * a_exy[i])
        .collect();
    (mean, Some(grad))
}

fn pool2<T: Real>(src: &[T], w: usize, h: usize) -> (Vec<T>, usize, usize) {
    let (w2, h2) = (w / 2, h / 2);
    let q = T::lit(0.25);
    let mut out = vec![T::zero(); w2 * h2];
    for y in 0..h2 {
        for x in 0..w2 {
            let i = 2 * y * w + 2 * x;
            out[y * w2 + x] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q;
        }
    }
    (out, w2, h2)
}

fn unpool2<T: Real>(g: &[T], w: usize, h: usize) -> Vec<T> {
    let (w2, h2) = (w / 2, h / 2);
    let q = T::lit(0.25);
    let mut out = vec![T::zero(); w * h];
    for y in 0..h2 {
        for x in 0..w2 {
            let v = g[y * w2 + x] * q;
            let i = 2 * y * w + 2 * x;
            out[i] = v;
            out[i + 1] = v;
            out[i + w] = v;
            out[i + w + 1] = v;
        }
    }
    out
}

/// `1 − mean over 3 dyadic scales of the per-channel mean SSIM`, with 2×2
/// average pooling between scales and an 11×11 Gaussian window (σ = 1.5)
/// renormalized at the borders.
pub fn perceptual_loss<T: Real>(pred: &ImageBuf<T>, gt: &ImageBuf<T>) -> Result<(T, ImageBuf<T>)> {
    pred.check_shape(gt)?;
    if pred.width < PERCEPTUAL_MIN_SIZE || pred.height < PERCEPTUAL_MIN_SIZE {
        return Err(Error::TooSmall {
            width: pred.width,
            height: pred.height,
        });
    }
    let nc = pred.channels;
    let weight = T::lit(1.0 / (SSIM_SCALES * nc) as f64);
    let mut total = T::zero();
    let mut grad = ImageBuf::new(pred.width, pred.height, nc);
    for c in 0..nc {
        let mut x = pred.channel(c).data;
        let mut y = gt.channel(c).data;
        let mut dims = vec![(pred.width, pred.height)];
        let mut scale_grads = Vec::with_capacity(SSIM_SCALES);
        for s in 0..SSIM_SCALES {
            let (w, h) = dims[s];
            let (m, g) = ssim_plane(&Window::new(w, h), &x, &y, Some(-weight));
            total += m;
            scale_grads.push(g.unwrap_or_default());
            if s + 1 < SSIM_SCALES {
                let (px, w2, h2) = pool2(&x, w, h);
                let (py, ..) = pool2(&y, w, h);
                x = px;
                y = py;
                dims.push((w2, h2));
            }
        }
        // fold coarse-scale gradients back to full resolution
        let mut acc = scale_grads.pop().unwrap_or_default();
        for s in (0..SSIM_SCALES - 1).rev() {
            let (w, h) = dims[s];
            let up = unpool2(&acc, w, h);
            acc = scale_grads[s]
                .iter()
                .zip(&up)
                .map(|(a, b)| *a + *b)
                .collect();
        }
        for (i, v) in acc.iter().enumerate() {
            grad.data[i * nc + c] = *v;
        }
    }
    Ok((T::one() - total * weight, grad))
}

/// Per-view image gradients from [`total_loss`].
#[derive(Debug, Clone)]
pub struct ViewGradients<T: Real> {
    pub d_rgb: ImageBuf<T>,
    pub d_alpha: ImageBuf<T>,
}

#[derive(Debug, Clone)]
pub struct LossGradients<T: Real> {
    pub views: Vec<ViewGradients<T>>,
    /// `∂L/∂log_scale` per Gaussian.
    pub log_scale: Vec<Vector3<T>>,
}

/// The weighted objective averaged over a batch of views.
///
/// When an image is smaller than [`PERCEPTUAL_MIN_SIZE`] and `lambda_perc`
/// is 0, the perceptual term is skipped and reported as 0.
pub fn total_loss<T: Real>(
    renders: &[RenderOutput<T>],
    gts: &[ImageBuf<T>],
    masks: &[ImageBuf<T>],
    scene: &SplatScene<T>,
    weights: &LossWeights,
) -> Result<(LossReport, LossGradients<T>)> {
    weights.validate()?;
    if renders.len() != gts.len() || renders.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} renders, {} images, {} masks",
            renders.len(),
            gts.len(),
            masks.len()
        )));
    }
    let nv = T::lit(renders.len().max(1) as f64);
    let (w1, wp, wa) = (
        T::lit(weights.lambda_l1) / nv,
        T::lit(weights.lambda_perc) / nv,
        T::lit(weights.lambda_alpha) / nv,
    );
    let mut report = LossReport::default();
    let mut views = Vec::with_capacity(renders.len());
    for ((r, gt), mask) in renders.iter().zip(gts).zip(masks) {
        let (l1, g1) = l1_loss(&r.rgb, gt)?;
        let (la, ga) = alpha_loss(&r.alpha, mask)?;
        let small = gt.width < PERCEPTUAL_MIN_SIZE || gt.height < PERCEPTUAL_MIN_SIZE;
        let mut d_rgb = g1;
        d_rgb.data.iter_mut().for_each(|v| *v *= w1);
        if !(small && weights.lambda_perc == 0.0) {
            let (lp, gp) = perceptual_loss(&r.rgb, gt)?;
            report.perceptual += lp.to_f64();
            for (d, g) in d_rgb.data.iter_mut().zip(&gp.data) {
                *d += wp * *g;
            }
        }
        let mut d_alpha = ga;
        d_alpha.data.iter_mut().for_each(|v| *v *= wa);
        report.l1 += l1.to_f64();
        report.alpha += la.to_f64();
        views.push(ViewGradients { d_rgb, d_alpha });
    }
    let n = renders.len().max(1) as f64;
    report.l1 /= n;
    report.perceptual /= n;
    report.alpha /= n;
    let mut log_scale = vec![Vector3::zeros(); scene.len()];
    if !scene.is_empty() {
        let (ls, gs) = scale_reg(scene)?;
        report.scale = ls.to_f64();
        let k = T::lit(weights.lambda_scale);
        log_scale = gs.into_iter().map(|g| g * k).collect();
    } else if weights.lambda_scale > 0.0 {
        return Err(Error::EmptyScene);
    }
    report.total = weights.lambda_l1 * report.l1
        + weights.lambda_perc * report.perceptual
        + weights.lambda_alpha * report.alpha
        + weights.lambda_scale * report.scale;
    Ok((report, LossGradients { views, log_scale }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::Gaussian3D;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> ImageBuf<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImageBuf::new(w, h, c);
        img.data
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.05..0.95));
        img
    }

    fn checkerboard(n: usize, cell: usize) -> ImageBuf<f64> {
        let mut img = ImageBuf::new(n, n, 3);
        for y in 0..n {
            for x in 0..n {
                let v = if (x / cell + y / cell) % 2 == 0 {
                    0.9
                } else {
                    0.1
                };
                for c in 0..3 {
                    let i = img.idx(x, y, c);
                    img.data[i] = v;
                }
            }
        }
        img
    }

    /// Central differences of `f` at a few sampled coordinates.
    fn check_image_grad(
        f: impl Fn(&ImageBuf<f64>) -> f64,
        x: &ImageBuf<f64>,
        analytic: &ImageBuf<f64>,
        h: f64,
        tol: f64,
        floor: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let i = rng.random_range(0..x.data.len());
            let mut p = x.clone();
            p.data[i] += h;
            let mut m = x.clone();
            m.data[i] -= h;
            let n = (f(&p) - f(&m)) / (2.0 * h);
            let a = analytic.data[i];
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            assert!(err < tol, "index {i}: analytic {a} numeric {n}");
        }
    }

    #[test]
    fn l1_examples() {
        let a = random_image(8, 8, 3, 1);
        assert_eq!(l1_loss(&a, &a).unwrap().0, 0.0);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v += 0.5);
        assert!((l1_loss(&b, &a).unwrap().0 - 0.5).abs() < 1e-12);
        assert!(l1_loss(&a, &ImageBuf::new(8, 7, 3)).is_err());
    }

    #[test]
    fn l1_gradient() {
        let a = random_image(8, 8, 3, 1);
        let b = random_image(8, 8, 3, 2);
        let (_, g) = l1_loss(&a, &b).unwrap();
        check_image_grad(|x| l1_loss(x, &b).unwrap().0, &a, &g, 1e-6, 1e-4, 1e-12);
    }

    #[test]
    fn alpha_examples_and_gradient() {
        let a = random_image(8, 8, 1, 3);
        assert_eq!(alpha_loss(&a, &a).unwrap().0, 0.0);
        let ones = ImageBuf::filled(8, 8, 1, 1.0);
        let zeros = ImageBuf::new(8, 8, 1);
        assert_eq!(alpha_loss(&ones, &zeros).unwrap().0, 1.0);
        let b = random_image(8, 8, 1, 4);
        let (_, g) = alpha_loss(&a, &b).unwrap();
        check_image_grad(|x| alpha_loss(x, &b).unwrap().0, &a, &g, 1e-6, 1e-4, 1e-12);
    }

    #[test]
    fn perceptual_identity_and_inversion() {
        let a = random_image(32, 32, 3, 5);
        assert!(perceptual_loss(&a, &a).unwrap().0.abs() < 1e-9);
        let board = checkerboard(32, 4);
        let mut inv = board.clone();
        inv.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        let v = perceptual_loss(&inv, &board).unwrap().0;
        assert!(v > 0.5, "{v}");
    }

    #[test]
    fn perceptual_too_small() {
        let a = random_image(31, 40, 3, 5);
        assert!(matches!(
            perceptual_loss(&a, &a),
            Err(Error::TooSmall { .. })
        ));
    }

    #[test]
    fn perceptual_gradient() {
        let a = random_image(33, 34, 3, 6);
        let b = random_image(33, 34, 3, 7);
        let (_, g) = perceptual_loss(&a, &b).unwrap();
        check_image_grad(
            |x| perceptual_loss(x, &b).unwrap().0,
            &a,
            &g,
            1e-6,
            1e-3,
            1e-9,
        );
    }

    #[test]
    fn window_adjoint_identity() {
        // <F x, y> = <x, Fᵀ y>
        let win = Window::<f64>::new(13, 9);
        let x = random_image(13, 9, 1, 1).data;
        let y = random_image(13, 9, 1, 2).data;
        let lhs: f64 = win.apply(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(win.adjoint(&y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn scene_with_scales(scales: &[[f64; 3]]) -> SplatScene<f64> {
        let gs = scales
            .iter()
            .map(|s| {
                let mut g = Gaussian3D::isotropic(Vector3::zeros(), 1.0, Vector3::zeros(), 0.5);
                g.log_scale = Vector3::new(s[0].ln(), s[1].ln(), s[2].ln());
                g
            })
            .collect();
        SplatScene::new(gs, Vector3::zeros())
    }

    #[test]
    fn scale_reg_examples() {
        let iso = scene_with_scales(&[[1.0; 3], [1.0; 3]]);
        assert_eq!(scale_reg(&iso).unwrap().0, 3.0);
        let s = scene_with_scales(&[[2.0, 1.0, 1.0]]);
        let (v, _) = scale_reg(&s).unwrap();
        assert!((v - 4.0 - 1.0).abs() < 1e-9, "anisotropy term {}", v - 4.0);
        assert!(matches!(
            scale_reg(&SplatScene::<f64>::empty(Vector3::zeros())),
            Err(Error::EmptyScene)
        ));
    }

    #[test]
    fn scale_reg_gradient() {
        let mut s = scene_with_scales(&[[0.3, 0.1, 0.05], [0.02, 0.2, 0.07], [0.5, 0.4, 0.45]]);
        let (_, g) = scale_reg(&s).unwrap();
        let h = 1e-6;
        for i in 0..s.len() {
            for k in 0..3 {
                let orig = s.gaussians[i].log_scale[k];
                s.gaussians[i].log_scale[k] = orig + h;
                let p = scale_reg(&s).unwrap().0;
                s.gaussians[i].log_scale[k] = orig - h;
                let m = scale_reg(&s).unwrap().0;
                s.gaussians[i].log_scale[k] = orig;
                let n = (p - m) / (2.0 * h);
                let err = (g[i][k] - n).abs() / g[i][k].abs().max(n.abs()).max(1e-9);
                assert!(err < 1e-3, "{i},{k}: {} vs {n}", g[i][k]);
            }
        }
    }
}
