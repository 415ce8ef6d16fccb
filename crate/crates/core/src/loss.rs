//! Training loss, its per-pixel gradient, and image quality metrics.
//!
//! Dense renders use `(1 − λ)·L1 + λ·(1 − SSIM)`; dilated renders use L1 over
//! the active pixels only. SSIM uses an 11×11 Gaussian window (σ = 1.5) with
//! zero padding, computed per channel and averaged.

use crate::dilation::DilationPattern;
use crate::error::{invalid, Result};
use crate::image::Image;
use crate::raster::RenderOutput;
use crate::scalar::Scalar;

pub const DEFAULT_SSIM_WEIGHT: f64 = 0.2;
pub const PSNR_CAP: f64 = 99.0;
const WINDOW_RADIUS: usize = 5;
const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Scalar loss and its gradient with respect to every active pixel, in rank order.
pub fn compute_loss<T: Scalar>(
    render: &RenderOutput<T>,
    target: &Image<T>,
    pattern: &DilationPattern,
    ssim_weight: T,
) -> Result<(T, Vec<[T; 3]>)> {
    if render.colors.len() != pattern.active_count() {
        return Err(invalid(format!(
            "render has {} pixels, pattern has {} active",
            render.colors.len(),
            pattern.active_count()
        )));
    }
    if target.width() != pattern.width() || target.height() != pattern.height() {
        return Err(invalid(format!(
            "target is {}x{}, pattern covers {}x{}",
            target.width(),
            target.height(),
            pattern.width(),
            pattern.height()
        )));
    }
    let n = render.colors.len() * 3;
    let inv_n = T::one() / T::from_index(n);
    let l1_weight = if pattern.is_dense() { T::one() - ssim_weight } else { T::one() };
    let mut l1 = T::zero();
    let mut grads = Vec::with_capacity(render.colors.len());
    for (rank, (x, y)) in pattern.active_pixels().enumerate() {
        let r = render.colors[rank];
        let t = target.get(x, y);
        let mut g = [T::zero(); 3];
        for c in 0..3 {
            let d = r[c] - t[c];
            l1 += d.abs();
            g[c] = l1_weight * inv_n * sign(d);
        }
        grads.push(g);
    }
    l1 = l1 * inv_n;
    if !pattern.is_dense() || ssim_weight == T::zero() {
        return Ok((l1_weight * l1, grads));
    }

    let rendered = Image::new(pattern.width(), pattern.height(), render.colors.clone())?;
    let (ssim, ssim_grad) = ssim_with_grad(&rendered, target)?;
    for (g, s) in grads.iter_mut().zip(ssim_grad) {
        for c in 0..3 {
            g[c] -= ssim_weight * s[c];
        }
    }
    Ok((l1_weight * l1 + ssim_weight * (T::one() - ssim), grads))
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `−10·log10(MSE)`, capped at 99 dB for identical images.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).as_f64().powi(2)).sum::<f64>())
        .sum();
    let mse = sum / (a.pixels().len() * 3) as f64;
    Ok(if mse == 0.0 { PSNR_CAP } else { (-10.0 * mse.log10()).min(PSNR_CAP) })
}

/// Mean SSIM over pixels and channels.
pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_same(a, b)?;
    let window = gaussian_window::<T>();
    let (w, h) = (a.width(), a.height());
    let mut total = T::zero();
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let stats = WindowStats::new(&x, &y, w, h, &window);
        total += (0..w * h).map(|i| stats.terms(i).ssim()).sum::<T>();
    }
    Ok(total.as_f64() / (w * h * 3) as f64)
}

fn check_same<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    if a.same_size(b) {
        Ok(())
    } else {
        Err(invalid(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

/// Mean SSIM of `x` against `y` and its gradient with respect to `x`.
pub fn ssim_with_grad<T: Scalar>(x_img: &Image<T>, y_img: &Image<T>) -> Result<(T, Vec<[T; 3]>)> {
    check_same(x_img, y_img)?;
    let window = gaussian_window::<T>();
    let (w, h) = (x_img.width(), x_img.height());
    let scale = T::one() / T::from_index(w * h * 3);
    let two = T::lit(2.0);
    let mut total = T::zero();
    let mut grad = vec![[T::zero(); 3]; w * h];
    for c in 0..3 {
        let x = channel(x_img, c);
        let y = channel(y_img, c);
        let stats = WindowStats::new(&x, &y, w, h, &window);
        let mut d_mu = vec![T::zero(); w * h];
        let mut d_exx = vec![T::zero(); w * h];
        let mut d_exy = vec![T::zero(); w * h];
        for i in 0..w * h {
            let t = stats.terms(i);
            total += t.ssim();
            let (mu_x, mu_y) = (stats.mu_x[i], stats.mu_y[i]);
            let num = t.n1 * t.n2;
            let den = t.d1 * t.d2;
            let den2 = den * den;
            let d_num = two * mu_y * t.n2 - two * mu_y * t.n1;
            let d_den = two * mu_x * t.d2 - two * mu_x * t.d1;
            d_mu[i] = (d_num * den - num * d_den) / den2;
            d_exx[i] = -num * t.d1 / den2;
            d_exy[i] = two * t.n1 / den;
        }
        // The window is symmetric, so the adjoint of the filter is the filter.
        let a = filter(&d_mu, w, h, &window);
        let b = filter(&d_exx, w, h, &window);
        let m = filter(&d_exy, w, h, &window);
        for i in 0..w * h {
            grad[i][c] = scale * (a[i] + two * x[i] * b[i] + y[i] * m[i]);
        }
    }
    Ok((total * scale, grad))
}

struct WindowStats<T> {
    mu_x: Vec<T>,
    mu_y: Vec<T>,
    e_xx: Vec<T>,
    e_yy: Vec<T>,
    e_xy: Vec<T>,
}

struct Terms<T> {
    n1: T,
    n2: T,
    d1: T,
    d2: T,
}

impl<T: Scalar> Terms<T> {
    fn ssim(&self) -> T {
        (self.n1 * self.n2) / (self.d1 * self.d2)
    }
}

impl<T: Scalar> WindowStats<T> {
    fn new(x: &[T], y: &[T], w: usize, h: usize, window: &[T]) -> Self {
        let prod = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&p, &q)| p * q).collect::<Vec<T>>();
        Self {
            mu_x: filter(x, w, h, window),
            mu_y: filter(y, w, h, window),
            e_xx: filter(&prod(x, x), w, h, window),
            e_yy: filter(&prod(y, y), w, h, window),
            e_xy: filter(&prod(x, y), w, h, window),
        }
    }

    fn terms(&self, i: usize) -> Terms<T> {
        let two = T::lit(2.0);
        let (mx, my) = (self.mu_x[i], self.mu_y[i]);
        let var_x = self.e_xx[i] - mx * mx;
        let var_y = self.e_yy[i] - my * my;
        let cov = self.e_xy[i] - mx * my;
        Terms {
            n1: two * mx * my + T::lit(C1),
            n2: two * cov + T::lit(C2),
            d1: mx * mx + my * my + T::lit(C1),
            d2: var_x + var_y + T::lit(C2),
        }
    }
}

fn channel<T: Scalar>(img: &Image<T>, c: usize) -> Vec<T> {
    img.pixels().iter().map(|p| p[c]).collect()
}

fn gaussian_window<T: Scalar>() -> Vec<T> {
    let raw: Vec<f64> = (0..=2 * WINDOW_RADIUS)
        .map(|i| {
            let d = i as f64 - WINDOW_RADIUS as f64;
            (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| T::lit(v / sum)).collect()
}

/// Separable "same"-size filtering with zero padding.
fn filter<T: Scalar>(src: &[T], w: usize, h: usize, k: &[T]) -> Vec<T> {
    let r = k.len() / 2;
    // Taps `j` whose source index `i + j - r` lies in `0..len`.
    let taps = |i: usize, len: usize| r.saturating_sub(i)..k.len().min(len + r - i);
    let mut tmp = vec![T::zero(); w * h];
    for (row, out) in src.chunks_exact(w).zip(tmp.chunks_exact_mut(w)) {
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for j in taps(x, w) {
                acc += k[j] * row[x + j - r];
            }
            *o = acc;
        }
    }
    let mut out = vec![T::zero(); w * h];
    for (y, o) in out.chunks_exact_mut(w).enumerate() {
        for j in taps(y, h) {
            let kv = k[j];
            let row = &tmp[(y + j - r) * w..][..w];
            for (a, &v) in o.iter_mut().zip(row) {
                *a += kv * v;
            }
        }
    }
    out
}
