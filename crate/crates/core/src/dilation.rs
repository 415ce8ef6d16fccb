//! Strided sampling patterns for dilated rendering and the matching
//! screen-space low-pass correction.
//!
//! A pattern of size `p` with offsets `(ox, oy)` activates pixel `(x, y)` iff
//! `x mod p == ox` and `y mod p == oy`. Active pixels are numbered in
//! row-major order; that dense rank is the index used for every per-pixel
//! buffer in the forward and backward passes, so both passes agree on which
//! output belongs to which pixel.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::splat::Covariance2x2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DilationPattern {
    pattern_size: usize,
    offset_x: usize,
    offset_y: usize,
    width: usize,
    height: usize,
    cols: usize,
    rows: usize,
}

impl DilationPattern {
    pub fn new(
        pattern_size: usize,
        offset_x: usize,
        offset_y: usize,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if pattern_size == 0 {
            return Err(invalid("dilation must be >= 1"));
        }
        if offset_x >= pattern_size || offset_y >= pattern_size {
            return Err(invalid(format!(
                "offsets ({offset_x}, {offset_y}) must be below the pattern size {pattern_size}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(invalid(format!("empty image {width}x{height}")));
        }
        let cols = strided_len(width, offset_x, pattern_size);
        let rows = strided_len(height, offset_y, pattern_size);
        Ok(Self {
            pattern_size,
            offset_x,
            offset_y,
            width,
            height,
            cols,
            rows,
        })
    }

    /// Every pixel active.
    pub fn dense(width: usize, height: usize) -> Result<Self> {
        Self::new(1, 0, 0, width, height)
    }

    /// Pattern for phase `iteration` of the deterministic offset cycle.
    pub fn cycled(pattern_size: usize, iteration: u64, width: usize, height: usize) -> Result<Self> {
        if pattern_size == 0 {
            return Err(invalid("dilation must be >= 1"));
        }
        let (ox, oy) = next_offsets(pattern_size, iteration);
        Self::new(pattern_size, ox, oy, width, height)
    }

    pub fn pattern_size(&self) -> usize {
        self.pattern_size
    }

    pub fn offsets(&self) -> (usize, usize) {
        (self.offset_x, self.offset_y)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Active pixels per row and number of active rows.
    pub fn grid(&self) -> (usize, usize) {
        (self.cols, self.rows)
    }

    pub fn active_count(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_dense(&self) -> bool {
        self.pattern_size == 1
    }

    pub fn is_active(&self, x: usize, y: usize) -> bool {
        x < self.width
            && y < self.height
            && x % self.pattern_size == self.offset_x
            && y % self.pattern_size == self.offset_y
    }

    pub fn rank_of(&self, x: usize, y: usize) -> Option<usize> {
        if !self.is_active(x, y) {
            return None;
        }
        let col = (x - self.offset_x) / self.pattern_size;
        let row = (y - self.offset_y) / self.pattern_size;
        Some(row * self.cols + col)
    }

    pub fn pixel_of(&self, rank: usize) -> Option<(usize, usize)> {
        if rank >= self.active_count() {
            return None;
        }
        let (row, col) = (rank / self.cols, rank % self.cols);
        Some((
            self.offset_x + col * self.pattern_size,
            self.offset_y + row * self.pattern_size,
        ))
    }

    /// Active pixels in rank order.
    pub fn active_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.active_count()).map(move |r| self.pixel_of(r).unwrap())
    }

    /// Active columns inside `[x0, x1)`.
    pub(crate) fn active_xs(&self, x0: usize, x1: usize) -> impl Iterator<Item = usize> {
        let (step, end) = (self.pattern_size, x1.min(self.width));
        first_aligned(x0, self.offset_x, step)
            .into_iter()
            .flat_map(move |start| (start..end).step_by(step))
    }

    /// Active rows inside `[y0, y1)`.
    pub(crate) fn active_ys(&self, y0: usize, y1: usize) -> impl Iterator<Item = usize> {
        let (step, end) = (self.pattern_size, y1.min(self.height));
        first_aligned(y0, self.offset_y, step)
            .into_iter()
            .flat_map(move |start| (start..end).step_by(step))
    }

    /// Variance added to both diagonal entries of every screen-space covariance.
    pub fn lowpass_inflation<T: Scalar>(&self) -> T {
        lowpass_inflation(self.pattern_size)
    }
}

fn strided_len(extent: usize, offset: usize, step: usize) -> usize {
    if offset >= extent {
        0
    } else {
        (extent - offset).div_ceil(step)
    }
}

fn first_aligned(start: usize, offset: usize, step: usize) -> Option<usize> {
    let phase = start % step;
    let delta = (offset + step - phase) % step;
    start.checked_add(delta)
}

/// Offsets for a given iteration: cycles through all `p²` phases.
pub fn next_offsets(pattern_size: usize, iteration: u64) -> (usize, usize) {
    let p = pattern_size.max(1) as u64;
    let index = iteration % (p * p);
    ((index % p) as usize, (index / p) as usize)
}

/// `0.3 + 0.5 (p - 1)`
pub fn lowpass_inflation<T: Scalar>(pattern_size: usize) -> T {
    T::lit(0.3 + 0.5 * (pattern_size as f64 - 1.0))
}

/// Inflates both diagonal entries; the off-diagonal term is unchanged.
pub fn apply_lowpass<T: Scalar>(cov: Covariance2x2<T>, pattern_size: usize) -> Covariance2x2<T> {
    let k = lowpass_inflation::<T>(pattern_size);
    Covariance2x2::new(cov.xx + k, cov.xy, cov.yy + k)
}
