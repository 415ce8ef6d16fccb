//! The Gaussian primitive: covariance parametrization, activations and point evaluation.

use crate::error::{invalid, Result, SplatError};
use crate::scalar::Scalar;

/// Number of optimizable scalars per Gaussian.
pub const PARAM_COUNT: usize = 9;

/// Offsets of each parameter group inside the flat `[T; PARAM_COUNT]` layout.
pub mod param {
    pub const POSITION: usize = 0;
    pub const ROTATION: usize = 2;
    pub const LOG_SCALES: usize = 3;
    pub const RAW_OPACITY: usize = 5;
    pub const COLOR: usize = 6;
}

/// Smallest per-axis standard deviation a Gaussian may shrink to, in pixels.
pub const MIN_SCALE: f64 = 1e-4;

/// Raw (pre-logistic) opacity and color values are kept within this magnitude
/// so the activated value stays strictly inside (0, 1) even in 32-bit mode.
pub const RAW_LIMIT: f64 = 15.0;

/// Symmetric 2x2 covariance in pixel² units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance2x2<T> {
    pub xx: T,
    pub xy: T,
    pub yy: T,
}

impl<T: Scalar> Covariance2x2<T> {
    pub fn new(xx: T, xy: T, yy: T) -> Self {
        Self { xx, xy, yy }
    }

    pub fn det(&self) -> T {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn is_positive_definite(&self) -> bool {
        self.xx > T::zero() && self.yy > T::zero() && self.det() > T::zero()
    }

    /// Inverse as `(a, b, c)` with `Σ⁻¹ = [[a, b], [b, c]]`.
    pub fn inverse(&self) -> Result<Covariance2x2<T>> {
        let det = self.det();
        if !(det > T::zero()) || !det.is_finite() || !self.xx.is_finite() || !self.yy.is_finite() {
            return Err(SplatError::NumericalDegeneracy(format!(
                "covariance is not positive definite (det = {det})"
            )));
        }
        let inv = T::one() / det;
        Ok(Covariance2x2::new(self.yy * inv, -self.xy * inv, self.xx * inv))
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> (T, T) {
        let half = T::lit(0.5);
        let mean = half * (self.xx + self.yy);
        let diff = half * (self.xx - self.yy);
        let radius = (diff * diff + self.xy * self.xy).sqrt();
        (mean - radius, mean + radius)
    }
}

/// One splat primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2D<T> {
    /// Center in pixel coordinates; pixel `(x, y)` is sampled at exactly `(x, y)`.
    pub position: [T; 2],
    pub rotation: T,
    /// Log of the per-axis standard deviations.
    pub log_scales: [T; 2],
    pub raw_opacity: T,
    /// Pre-logistic RGB.
    pub raw_color: [T; 3],
    /// Blend-order key, fixed at creation.
    pub depth_key: T,
}

impl<T: Scalar> Gaussian2D<T> {
    pub fn covariance(&self) -> Result<Covariance2x2<T>> {
        covariance_from_params(self.rotation, self.log_scales)
    }

    pub fn opacity(&self) -> T {
        activate(self.raw_opacity)
    }

    pub fn color(&self) -> [T; 3] {
        self.raw_color.map(activate)
    }

    pub fn scales(&self) -> [T; 2] {
        self.log_scales.map(T::exp)
    }

    pub fn params(&self) -> [T; PARAM_COUNT] {
        [
            self.position[0],
            self.position[1],
            self.rotation,
            self.log_scales[0],
            self.log_scales[1],
            self.raw_opacity,
            self.raw_color[0],
            self.raw_color[1],
            self.raw_color[2],
        ]
    }

    /// Overwrites every optimizable field; `depth_key` is left untouched.
    pub fn set_params(&mut self, p: &[T; PARAM_COUNT]) {
        self.position = [p[0], p[1]];
        self.rotation = p[2];
        self.log_scales = [p[3], p[4]];
        self.raw_opacity = p[5];
        self.raw_color = [p[6], p[7], p[8]];
    }

    /// Applies the scale clamp `(MIN_SCALE, max_scale)` and the raw-value limit.
    pub fn clamp(&mut self, max_scale: T) {
        let lo = T::lit((MIN_SCALE * 1.001).ln());
        let hi = (max_scale * T::lit(0.999)).ln();
        for s in &mut self.log_scales {
            *s = s.max(lo).min(hi);
        }
        let limit = T::lit(RAW_LIMIT);
        self.raw_opacity = self.raw_opacity.max(-limit).min(limit);
        for c in &mut self.raw_color {
            *c = c.max(-limit).min(limit);
        }
    }
}

/// Builds `R·S·Sᵀ·Rᵀ` with `S = diag(exp(log_scales))`.
pub fn covariance_from_params<T: Scalar>(rotation: T, log_scales: [T; 2]) -> Result<Covariance2x2<T>> {
    if !rotation.is_finite() || !log_scales.iter().all(|s| s.is_finite()) {
        return Err(invalid(format!(
            "non-finite covariance parameters: rotation {rotation}, log scales {log_scales:?}"
        )));
    }
    let (sin, cos) = rotation.sin_cos();
    let s0 = (log_scales[0] + log_scales[0]).exp();
    let s1 = (log_scales[1] + log_scales[1]).exp();
    Ok(Covariance2x2 {
        xx: cos * cos * s0 + sin * sin * s1,
        xy: cos * sin * (s0 - s1),
        yy: sin * sin * s0 + cos * cos * s1,
    })
}

/// `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))` using the unfiltered covariance.
pub fn eval_gaussian<T: Scalar>(g: &Gaussian2D<T>, x: [T; 2]) -> Result<T> {
    let conic = g.covariance()?.inverse()?;
    let dx = x[0] - g.position[0];
    let dy = x[1] - g.position[1];
    Ok(gaussian_falloff(&conic, dx, dy))
}

/// Falloff for an offset `(dx, dy)` given an inverse covariance.
#[inline]
pub(crate) fn gaussian_falloff<T: Scalar>(conic: &Covariance2x2<T>, dx: T, dy: T) -> T {
    let q = conic.xx * dx * dx + (conic.xy + conic.xy) * dx * dy + conic.yy * dy * dy;
    (T::lit(-0.5) * q).exp()
}

/// Logistic activation.
#[inline]
pub fn activate<T: Scalar>(raw: T) -> T {
    T::one() / (T::one() + (-raw).exp())
}

/// Inverse of [`activate`]; `value` must lie in (0, 1).
#[inline]
pub fn logit<T: Scalar>(value: T) -> T {
    (value / (T::one() - value)).ln()
}
