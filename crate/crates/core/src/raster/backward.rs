//! Reverse-mode gradients through blending, the logistic activations, the
//! low-pass filter and the rotation/log-scale covariance factorization.
//!
//! Each tile recomputes its forward blend per pixel, then walks the
//! contributors back to front carrying the color "behind" each splat:
//! `B_{i-1} = cᵢ σᵢ + (1 − σᵢ) B_i`, `B_last = bg`, which gives
//! `∂C/∂σᵢ = Tᵢ (cᵢ − Bᵢ)` without dividing by `1 − σᵢ`.
//! Tiles produce private partial sums that are merged in tile order, so the
//! result does not depend on the number of worker threads.

use rayon::prelude::*;

use super::{GaussianGrad, GradientSet, Rasterizer, RowBuckets, Splat};
use crate::dilation::DilationPattern;
use crate::error::Result;
use crate::model::GaussianModel;
use crate::scalar::Scalar;
use crate::splat::gaussian_falloff;

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPass<T> {
    pub grads: GradientSet<T>,
    /// Gaussians whose blend weight exceeded `w_min` at some active pixel.
    pub visited: Vec<bool>,
    pub blend_op_count: u64,
}

/// Gradients with respect to the blending inputs of one splat, before the
/// activation and covariance chain rules are applied.
#[derive(Debug, Clone, Copy)]
struct SplatAccum<T> {
    mean: [T; 2],
    /// ∂L/∂Σ as the symmetric entries (xx, xy, yy) of a full-matrix gradient.
    cov: [T; 3],
    opacity: T,
    color: [T; 3],
    visited: bool,
    touched: bool,
}

impl<T: Scalar> SplatAccum<T> {
    fn zero() -> Self {
        Self {
            mean: [T::zero(); 2],
            cov: [T::zero(); 3],
            opacity: T::zero(),
            color: [T::zero(); 3],
            visited: false,
            touched: false,
        }
    }

    fn add(&mut self, other: &Self) {
        for k in 0..2 {
            self.mean[k] += other.mean[k];
        }
        for k in 0..3 {
            self.cov[k] += other.cov[k];
            self.color[k] += other.color[k];
        }
        self.opacity += other.opacity;
        self.visited |= other.visited;
        self.touched |= other.touched;
    }
}

struct Contribution<T> {
    slot: usize,
    sigma: T,
    t_before: T,
    falloff: T,
    dx: T,
    dy: T,
}

pub(super) fn backward<T: Scalar>(
    raster: &Rasterizer<T>,
    model: &GaussianModel<T>,
    pattern: &DilationPattern,
    pixel_grads: &[[T; 3]],
    lowpass_p: usize,
) -> Result<BackwardPass<T>> {
    let binned = raster.bin(model, pattern, lowpass_p)?;
    let cfg = raster.config();
    let (w, h) = (pattern.width(), pattern.height());
    let half = T::lit(0.5);

    let per_tile: Vec<(Vec<SplatAccum<T>>, u64)> = raster.install(|| {
        (0..binned.tiles.len())
            .into_par_iter()
            .map(|tile| {
                let list = &binned.tiles[tile];
                if list.is_empty() {
                    return (Vec::new(), 0);
                }
                let (x0, x1, y0, y1) = binned.tile_bounds(tile, cfg.tile_size, w, h);
                let mut accum = vec![SplatAccum::zero(); list.len()];
                let mut contribs: Vec<Contribution<T>> = Vec::with_capacity(list.len());
                let mut ops = 0u64;
                let mut row = RowBuckets::new(x0, x1);
                for y in pattern.active_ys(y0, y1) {
                    row.fill(&binned, list, pattern, y);
                    for x in pattern.active_xs(x0, x1) {
                        let g = pixel_grads[pattern.rank_of(x, y).unwrap()];
                        let (px, py) = (T::from_index(x), T::from_index(y));

                        contribs.clear();
                        let mut t = T::one();
                        for &slot in row.slots(x) {
                            let (slot, k) = (slot as usize, list[slot as usize]);
                            if t < cfg.t_min {
                                break;
                            }
                            ops += 1;
                            let s: &Splat<T> = &binned.splats[k as usize];
                            let Some((dx, dy)) = s.offset_if_inside(px, py) else {
                                continue;
                            };
                            let falloff = gaussian_falloff(&s.conic, dx, dy);
                            let sigma = s.opacity * falloff;
                            contribs.push(Contribution { slot, sigma, t_before: t, falloff, dx, dy });
                            t *= T::one() - sigma;
                        }

                        let mut behind = cfg.background;
                        for c in contribs.iter().rev() {
                            let s = &binned.splats[list[c.slot] as usize];
                            let acc = &mut accum[c.slot];
                            let weight = c.sigma * c.t_before;
                            acc.touched = true;
                            if weight > cfg.w_min {
                                acc.visited = true;
                            }
                            let mut d_sigma = T::zero();
                            for ch in 0..3 {
                                acc.color[ch] += g[ch] * weight;
                                d_sigma += g[ch] * c.t_before * (s.color[ch] - behind[ch]);
                                behind[ch] = s.color[ch] * c.sigma + (T::one() - c.sigma) * behind[ch];
                            }
                            acc.opacity += d_sigma * c.falloff;
                            let d_falloff = d_sigma * s.opacity;
                            // ∂G/∂μ = G Σ⁻¹ d and ∂G/∂Σ = ½ G (Σ⁻¹ d)(Σ⁻¹ d)ᵀ
                            let ax = s.conic.xx * c.dx + s.conic.xy * c.dy;
                            let ay = s.conic.xy * c.dx + s.conic.yy * c.dy;
                            let k_mean = d_falloff * c.falloff;
                            acc.mean[0] += k_mean * ax;
                            acc.mean[1] += k_mean * ay;
                            let k_cov = half * k_mean;
                            acc.cov[0] += k_cov * ax * ax;
                            acc.cov[1] += k_cov * ax * ay;
                            acc.cov[2] += k_cov * ay * ay;
                        }
                    }
                }
                (accum, ops)
            })
            .collect()
    });

    let n = model.len();
    let mut totals = vec![SplatAccum::zero(); n];
    let mut blend_op_count = 0;
    for (tile, (accum, ops)) in per_tile.into_iter().enumerate() {
        blend_op_count += ops;
        for (slot, acc) in accum.iter().enumerate() {
            if acc.touched {
                let index = binned.splats[binned.tiles[tile][slot] as usize].index;
                totals[index].add(acc);
            }
        }
    }

    let mut grads = GradientSet::zeros(n);
    let mut visited = vec![false; n];
    for (i, (acc, g)) in totals.iter().zip(model.gaussians()).enumerate() {
        visited[i] = acc.visited;
        if !acc.touched {
            continue;
        }
        grads.0[i] = chain_to_params(acc, g);
    }
    Ok(BackwardPass {
        grads,
        visited,
        blend_op_count,
    })
}

fn chain_to_params<T: Scalar>(acc: &SplatAccum<T>, g: &crate::splat::Gaussian2D<T>) -> GaussianGrad<T> {
    let alpha = g.opacity();
    let color = g.color();
    let (sin, cos) = g.rotation.sin_cos();
    let s0 = (g.log_scales[0] + g.log_scales[0]).exp();
    let s1 = (g.log_scales[1] + g.log_scales[1]).exp();
    let [m00, m01, m11] = acc.cov;
    let two = T::lit(2.0);
    // Σ = s0² u uᵀ + s1² v vᵀ with u = (cos, sin), v = (−sin, cos).
    let (ux, uy, vx, vy) = (cos, sin, -sin, cos);
    let u_m_u = m00 * ux * ux + two * m01 * ux * uy + m11 * uy * uy;
    let v_m_v = m00 * vx * vx + two * m01 * vx * vy + m11 * vy * vy;
    let u_m_v = m00 * ux * vx + m01 * (ux * vy + uy * vx) + m11 * uy * vy;
    GaussianGrad {
        position: acc.mean,
        rotation: two * (s0 - s1) * u_m_v,
        log_scales: [two * s0 * u_m_u, two * s1 * v_m_v],
        raw_opacity: acc.opacity * alpha * (T::one() - alpha),
        color: [0, 1, 2].map(|c| acc.color[c] * color[c] * (T::one() - color[c])),
    }
}
