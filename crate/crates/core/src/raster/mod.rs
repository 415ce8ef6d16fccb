//! Tile-based splat rasterization restricted to the active pixels of a
//! [`DilationPattern`], with an analytic backward pass.
//!
//! Every Gaussian contributes to pixel `(x, y)` iff the pixel lies inside the
//! 3σ bounding box of its low-pass-filtered covariance. Tiles only decide which
//! Gaussians are tested; the per-pixel rule alone decides contribution, so the
//! tiled path, the dense reference path and every dilation phase produce
//! identical values at shared pixels.
//!
//! Blending is front to back in ascending `depth_key` (ties by model index):
//! `C = Σ cᵢ σᵢ Tᵢ + T·bg`, `σᵢ = αᵢ G′ᵢ(x)`, `Tᵢ = Π_{j<i} (1 − σⱼ)`,
//! stopping once `T < t_min`.

mod backward;

use std::sync::Arc;

use rayon::prelude::*;

use crate::dilation::{lowpass_inflation, DilationPattern};
use crate::error::{invalid, Result, SplatError};
use crate::image::Image;
use crate::model::GaussianModel;
use crate::scalar::Scalar;
use crate::splat::{covariance_from_params, gaussian_falloff, Covariance2x2, PARAM_COUNT};

pub use backward::BackwardPass;

pub const DEFAULT_TILE_SIZE: usize = 16;
pub const DEFAULT_T_MIN: f64 = 1e-4;
pub const DEFAULT_W_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterConfig<T> {
    pub tile_size: usize,
    /// Blending stops once transmittance falls below this.
    pub t_min: T,
    /// Minimum blend weight for a Gaussian to count as visited at a pixel.
    pub w_min: T,
    pub background: [T; 3],
}

impl<T: Scalar> Default for RasterConfig<T> {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            t_min: T::lit(DEFAULT_T_MIN),
            w_min: T::lit(DEFAULT_W_MIN),
            background: [T::zero(); 3],
        }
    }
}

/// Colors and transmittance at active pixels, indexed by dense rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput<T> {
    pub colors: Vec<[T; 3]>,
    pub final_transmittance: Vec<T>,
    /// Pixel-Gaussian pairs examined by the blend loop.
    pub blend_op_count: u64,
}

impl<T: Scalar> RenderOutput<T> {
    /// Scatters the active pixels into a full raster filled with `fill`.
    pub fn to_image(&self, pattern: &DilationPattern, fill: [T; 3]) -> Image<T> {
        let mut img = Image::filled(pattern.width(), pattern.height(), fill);
        for (rank, (x, y)) in pattern.active_pixels().enumerate() {
            img.set(x, y, self.colors[rank]);
        }
        img
    }
}

/// Loss gradient for one Gaussian, in loss units per parameter unit.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GaussianGrad<T> {
    pub position: [T; 2],
    pub rotation: T,
    pub log_scales: [T; 2],
    pub raw_opacity: T,
    pub color: [T; 3],
}

impl<T: Scalar> GaussianGrad<T> {
    pub fn zero() -> Self {
        Self::from_params(&[T::zero(); PARAM_COUNT])
    }

    /// Same layout as [`crate::splat::Gaussian2D::params`].
    pub fn to_params(&self) -> [T; PARAM_COUNT] {
        [
            self.position[0],
            self.position[1],
            self.rotation,
            self.log_scales[0],
            self.log_scales[1],
            self.raw_opacity,
            self.color[0],
            self.color[1],
            self.color[2],
        ]
    }

    pub fn from_params(p: &[T; PARAM_COUNT]) -> Self {
        Self {
            position: [p[0], p[1]],
            rotation: p[2],
            log_scales: [p[3], p[4]],
            raw_opacity: p[5],
            color: [p[6], p[7], p[8]],
        }
    }
}

/// One gradient per Gaussian, in model order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet<T>(pub Vec<GaussianGrad<T>>);

impl<T: Scalar> GradientSet<T> {
    pub fn zeros(n: usize) -> Self {
        Self(vec![GaussianGrad::zero(); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, GaussianGrad<T>> {
        self.0.iter()
    }
}

impl<T> std::ops::Index<usize> for GradientSet<T> {
    type Output = GaussianGrad<T>;

    fn index(&self, i: usize) -> &GaussianGrad<T> {
        &self.0[i]
    }
}

/// A Gaussian prepared for blending: activated attributes and filtered conic.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Splat<T> {
    pub index: usize,
    pub mean: [T; 2],
    pub conic: Covariance2x2<T>,
    pub opacity: T,
    pub color: [T; 3],
    /// 3σ half extents of the filtered covariance.
    pub extent: [T; 2],
}

impl<T: Scalar> Splat<T> {
    #[inline]
    pub fn offset_if_inside(&self, px: T, py: T) -> Option<(T, T)> {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        (dx.abs() <= self.extent[0] && dy.abs() <= self.extent[1]).then_some((dx, dy))
    }
}

/// Splats in blend order, binned to tiles.
pub(crate) struct Binned<T> {
    pub splats: Vec<Splat<T>>,
    /// For each tile, indices into `splats` in blend order.
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
    /// Inclusive pixel span `[x0, x1, y0, y1]` of each splat, with the same
    /// slack as the binning. Empty for splats that miss the image.
    pub spans: Vec<[u32; 4]>,
}

impl<T: Scalar> Binned<T> {
    pub fn tile_bounds(&self, tile: usize, tile_size: usize, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = tx * tile_size;
        let y0 = ty * tile_size;
        (x0, (x0 + tile_size).min(w), y0, (y0 + tile_size).min(h))
    }
}

/// Per-pixel candidate lists for one row of a tile: for every active column,
/// the positions in the tile list whose span covers the pixel, in blend order.
pub(crate) struct RowBuckets {
    x0: usize,
    buckets: Vec<Vec<u32>>,
}

impl RowBuckets {
    pub fn new(x0: usize, x1: usize) -> Self {
        Self {
            x0,
            buckets: vec![Vec::new(); x1 - x0],
        }
    }

    pub fn fill<T>(&mut self, binned: &Binned<T>, list: &[u32], pattern: &DilationPattern, y: usize) {
        self.buckets.iter_mut().for_each(Vec::clear);
        let (p, (ox, _)) = (pattern.pattern_size(), pattern.offsets());
        let x1 = self.x0 + self.buckets.len();
        let y = y as u32;
        for (slot, &k) in list.iter().enumerate() {
            let s = binned.spans[k as usize];
            if y < s[2] || y > s[3] {
                continue;
            }
            let lo = (s[0] as usize).max(self.x0);
            let hi = (s[1] as usize).min(x1 - 1);
            if lo > hi {
                continue;
            }
            let first = lo + (ox + p - lo % p) % p;
            for x in (first..=hi).step_by(p) {
                self.buckets[x - self.x0].push(slot as u32);
            }
        }
    }

    pub fn slots(&self, x: usize) -> &[u32] {
        &self.buckets[x - self.x0]
    }
}

/// Blend-order splats for a model: ascending depth key, ties by index.
pub(crate) fn prepare_splats<T: Scalar>(model: &GaussianModel<T>, lowpass_p: usize) -> Result<Vec<Splat<T>>> {
    let inflation: T = lowpass_inflation(lowpass_p);
    let three = T::lit(3.0);
    let mut splats = Vec::with_capacity(model.len());
    for (index, g) in model.gaussians().iter().enumerate() {
        let cov = covariance_from_params(g.rotation, g.log_scales)?;
        if !g.position.iter().all(|v| v.is_finite()) {
            return Err(invalid(format!("Gaussian {index} has a non-finite position")));
        }
        let filtered = Covariance2x2::new(cov.xx + inflation, cov.xy, cov.yy + inflation);
        let conic = filtered.inverse()?;
        splats.push(Splat {
            index,
            mean: g.position,
            conic,
            opacity: g.opacity(),
            color: g.color(),
            extent: [three * filtered.xx.sqrt(), three * filtered.yy.sqrt()],
        });
    }
    let keys: Vec<f64> = model.gaussians().iter().map(|g| g.depth_key.as_f64()).collect();
    splats.sort_by(|a, b| keys[a.index].total_cmp(&keys[b.index]).then(a.index.cmp(&b.index)));
    Ok(splats)
}

fn bin_splats<T: Scalar>(
    splats: Vec<Splat<T>>,
    tile_size: usize,
    width: usize,
    height: usize,
) -> Binned<T> {
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    let mut spans = vec![[1, 0, 1, 0]; splats.len()];
    for (k, s) in splats.iter().enumerate() {
        // One pixel of slack on each side; the per-pixel test is authoritative.
        let Some((x0, x1)) = pixel_span(s.mean[0], s.extent[0], width) else {
            continue;
        };
        let Some((y0, y1)) = pixel_span(s.mean[1], s.extent[1], height) else {
            continue;
        };
        spans[k] = [x0 as u32, x1 as u32, y0 as u32, y1 as u32];
        for ty in y0 / tile_size..=y1 / tile_size {
            for tx in x0 / tile_size..=x1 / tile_size {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    Binned {
        splats,
        tiles,
        tiles_x,
        spans,
    }
}

fn pixel_span<T: Scalar>(center: T, extent: T, len: usize) -> Option<(usize, usize)> {
    let lo = (center - extent).floor().as_f64() - 1.0;
    let hi = (center + extent).ceil().as_f64() + 1.0;
    if hi < 0.0 || lo > (len - 1) as f64 || !lo.is_finite() || !hi.is_finite() {
        return None;
    }
    Some((lo.max(0.0) as usize, (hi.min((len - 1) as f64)) as usize))
}

/// Front-to-back blend of one pixel. Returns color, final transmittance and
/// the number of splats examined.
#[inline]
pub(crate) fn blend_pixel<T: Scalar>(
    splats: &[Splat<T>],
    order: impl Iterator<Item = usize>,
    px: T,
    py: T,
    cfg: &RasterConfig<T>,
) -> ([T; 3], T, u64) {
    let mut color = [T::zero(); 3];
    let mut t = T::one();
    let mut ops = 0u64;
    for k in order {
        if t < cfg.t_min {
            break;
        }
        ops += 1;
        let s = &splats[k];
        let Some((dx, dy)) = s.offset_if_inside(px, py) else {
            continue;
        };
        let sigma = s.opacity * gaussian_falloff(&s.conic, dx, dy);
        let w = sigma * t;
        for c in 0..3 {
            color[c] += s.color[c] * w;
        }
        t *= T::one() - sigma;
    }
    for c in 0..3 {
        color[c] += t * cfg.background[c];
    }
    (color, t, ops)
}

pub struct Rasterizer<T> {
    config: RasterConfig<T>,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl<T: Scalar> Clone for Rasterizer<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            pool: self.pool.clone(),
        }
    }
}

impl<T: Scalar> Rasterizer<T> {
    /// `threads == 0` runs on the global rayon pool.
    pub fn new(config: RasterConfig<T>, threads: usize) -> Result<Self> {
        if config.tile_size == 0 {
            return Err(invalid("tile size must be positive"));
        }
        let pool = if threads == 0 {
            None
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| invalid(format!("cannot build a {threads}-thread pool: {e}")))?;
            Some(Arc::new(pool))
        };
        Ok(Self { config, pool })
    }

    pub fn config(&self) -> &RasterConfig<T> {
        &self.config
    }

    pub fn set_background(&mut self, background: [T; 3]) {
        self.config.background = background;
    }

    pub(crate) fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }

    pub(crate) fn bin(&self, model: &GaussianModel<T>, pattern: &DilationPattern, lowpass_p: usize) -> Result<Binned<T>> {
        let splats = prepare_splats(model, lowpass_p)?;
        Ok(bin_splats(splats, self.config.tile_size, pattern.width(), pattern.height()))
    }

    /// Renders the active pixels of `pattern`, low-pass filtering with the
    /// pattern's own size.
    pub fn render(&self, model: &GaussianModel<T>, pattern: &DilationPattern) -> Result<RenderOutput<T>> {
        self.render_with_lowpass(model, pattern, pattern.pattern_size())
    }

    pub fn render_with_lowpass(
        &self,
        model: &GaussianModel<T>,
        pattern: &DilationPattern,
        lowpass_p: usize,
    ) -> Result<RenderOutput<T>> {
        if lowpass_p == 0 {
            return Err(invalid("low-pass pattern size must be >= 1"));
        }
        let binned = self.bin(model, pattern, lowpass_p)?;
        let n = pattern.active_count();
        let mut colors = vec![self.config.background; n];
        let mut final_transmittance = vec![T::one(); n];
        let cfg = &self.config;
        let tile_size = cfg.tile_size;
        let (w, h) = (pattern.width(), pattern.height());

        let per_tile: Vec<(Vec<(usize, [T; 3], T)>, u64)> = self.install(|| {
            (0..binned.tiles.len())
                .into_par_iter()
                .map(|tile| {
                    let list = &binned.tiles[tile];
                    if list.is_empty() {
                        return (Vec::new(), 0);
                    }
                    let (x0, x1, y0, y1) = binned.tile_bounds(tile, tile_size, w, h);
                    let mut out = Vec::new();
                    let mut row = RowBuckets::new(x0, x1);
                    let mut ops = 0;
                    for y in pattern.active_ys(y0, y1) {
                        row.fill(&binned, list, pattern, y);
                        for x in pattern.active_xs(x0, x1) {
                            let (c, t, n_ops) = blend_pixel(
                                &binned.splats,
                                row.slots(x).iter().map(|&slot| list[slot as usize] as usize),
                                T::from_index(x),
                                T::from_index(y),
                                cfg,
                            );
                            ops += n_ops;
                            out.push((pattern.rank_of(x, y).unwrap(), c, t));
                        }
                    }
                    (out, ops)
                })
                .collect()
        });

        let mut blend_op_count = 0;
        for (pixels, ops) in per_tile {
            blend_op_count += ops;
            for (rank, c, t) in pixels {
                colors[rank] = c;
                final_transmittance[rank] = t;
            }
        }
        Ok(RenderOutput {
            colors,
            final_transmittance,
            blend_op_count,
        })
    }

    /// Full-resolution render with the given low-pass size.
    pub fn render_image(&self, model: &GaussianModel<T>, width: usize, height: usize, lowpass_p: usize) -> Result<Image<T>> {
        let pattern = DilationPattern::dense(width, height)?;
        let out = self.render_with_lowpass(model, &pattern, lowpass_p)?;
        Image::new(width, height, out.colors)
    }

    /// Untiled, pattern-free reference: every pixel blends every splat.
    pub fn render_reference(&self, model: &GaussianModel<T>, width: usize, height: usize, lowpass_p: usize) -> Result<Image<T>> {
        if width == 0 || height == 0 {
            return Err(invalid("empty image"));
        }
        let splats = prepare_splats(model, lowpass_p)?;
        Ok(Image::from_fn(width, height, |x, y| {
            blend_pixel(&splats, 0..splats.len(), T::from_index(x), T::from_index(y), &self.config).0
        }))
    }

    /// Analytic gradients for per-active-pixel loss gradients `pixel_grads`
    /// (indexed by dense rank).
    pub fn backward(
        &self,
        model: &GaussianModel<T>,
        pattern: &DilationPattern,
        pixel_grads: &[[T; 3]],
    ) -> Result<BackwardPass<T>> {
        self.backward_with_lowpass(model, pattern, pixel_grads, pattern.pattern_size())
    }

    /// Backward pass matching [`Rasterizer::render_with_lowpass`].
    pub fn backward_with_lowpass(
        &self,
        model: &GaussianModel<T>,
        pattern: &DilationPattern,
        pixel_grads: &[[T; 3]],
        lowpass_p: usize,
    ) -> Result<BackwardPass<T>> {
        if lowpass_p == 0 {
            return Err(invalid("low-pass pattern size must be >= 1"));
        }
        if pixel_grads.len() != pattern.active_count() {
            return Err(SplatError::InvalidParameter(format!(
                "{} pixel gradients for a pattern with {} active pixels",
                pixel_grads.len(),
                pattern.active_count()
            )));
        }
        backward::backward(self, model, pattern, pixel_grads, lowpass_p)
    }
}
