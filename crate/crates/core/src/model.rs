//! The growable Gaussian collection and its per-Gaussian bookkeeping.

use crate::error::{invalid, Result};
use crate::raster::GradientSet;
use crate::scalar::Scalar;
use crate::splat::Gaussian2D;

/// Per-Gaussian gradient and visit statistics feeding densification.
///
/// `pos_grad_norm_accum`, `color_grad_norm_accum` and `accum_count` are
/// cleared after every densification event. `visit_count` is a lifetime
/// counter; `window_visits` is cleared at every visit-threshold audit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyStats<T> {
    pub pos_grad_norm_accum: Vec<T>,
    pub color_grad_norm_accum: Vec<T>,
    pub accum_count: Vec<u32>,
    pub visit_count: Vec<u32>,
    pub window_visits: Vec<u32>,
}

impl<T: Scalar> DensifyStats<T> {
    pub fn len(&self) -> usize {
        self.accum_count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accum_count.is_empty()
    }

    fn push_zeroed(&mut self) {
        self.pos_grad_norm_accum.push(T::zero());
        self.color_grad_norm_accum.push(T::zero());
        self.accum_count.push(0);
        self.visit_count.push(0);
        self.window_visits.push(0);
    }

    /// Folds one backward pass into the statistics. Only visited Gaussians
    /// contribute samples.
    pub fn record(&mut self, grads: &GradientSet<T>, visited: &[bool]) -> Result<()> {
        self.record_scaled(grads, visited, [T::one(); 2])
    }

    /// Like [`record`](Self::record), with the positional gradient rescaled
    /// per axis before taking its norm.
    pub fn record_scaled(&mut self, grads: &GradientSet<T>, visited: &[bool], position_scale: [T; 2]) -> Result<()> {
        if grads.len() != self.len() || visited.len() != self.len() {
            return Err(invalid(format!(
                "stats for {} Gaussians cannot absorb {} gradients / {} visit flags",
                self.len(),
                grads.len(),
                visited.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !visited[i] {
                continue;
            }
            let pos = [g.position[0] * position_scale[0], g.position[1] * position_scale[1]];
            self.pos_grad_norm_accum[i] += norm(&pos);
            self.color_grad_norm_accum[i] += norm(&g.color);
            self.accum_count[i] += 1;
            self.visit_count[i] += 1;
            self.window_visits[i] += 1;
        }
        Ok(())
    }

    /// Averaged positional gradient norm, `None` when nothing was accumulated.
    pub fn mean_pos_grad(&self, i: usize) -> Option<T> {
        (self.accum_count[i] > 0)
            .then(|| self.pos_grad_norm_accum[i] / T::lit(self.accum_count[i] as f64))
    }

    pub fn mean_color_grad(&self, i: usize) -> Option<T> {
        (self.accum_count[i] > 0)
            .then(|| self.color_grad_norm_accum[i] / T::lit(self.accum_count[i] as f64))
    }

    pub fn reset_accumulators(&mut self) {
        self.pos_grad_norm_accum.iter_mut().for_each(|v| *v = T::zero());
        self.color_grad_norm_accum.iter_mut().for_each(|v| *v = T::zero());
        self.accum_count.iter_mut().for_each(|v| *v = 0);
    }

    pub fn reset_window(&mut self) {
        self.window_visits.iter_mut().for_each(|v| *v = 0);
    }

    fn retain(&mut self, keep: &[bool]) {
        retain_by(&mut self.pos_grad_norm_accum, keep);
        retain_by(&mut self.color_grad_norm_accum, keep);
        retain_by(&mut self.accum_count, keep);
        retain_by(&mut self.visit_count, keep);
        retain_by(&mut self.window_visits, keep);
    }
}

fn norm<T: Scalar, const N: usize>(v: &[T; N]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub(crate) fn retain_by<V>(values: &mut Vec<V>, keep: &[bool]) {
    let mut it = keep.iter();
    values.retain(|_| *it.next().unwrap());
}

/// Gaussians plus parallel per-Gaussian arrays. Every array is indexed by the
/// same position; spawn appends and prune compacts all of them together.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel<T> {
    gaussians: Vec<Gaussian2D<T>>,
    ids: Vec<u64>,
    visit_thresholds: Vec<u32>,
    pub stats: DensifyStats<T>,
    next_id: u64,
}

impl<T: Scalar> Default for GaussianModel<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GaussianModel<T> {
    pub fn new() -> Self {
        Self {
            gaussians: Vec::new(),
            ids: Vec::new(),
            visit_thresholds: Vec::new(),
            stats: DensifyStats::default(),
            next_id: 0,
        }
    }

    pub fn from_gaussians(gaussians: Vec<Gaussian2D<T>>, visit_threshold: u32) -> Self {
        let mut model = Self::new();
        for g in gaussians {
            model.push(g, visit_threshold);
        }
        model
    }

    /// Appends a Gaussian with zeroed statistics; returns its unique id.
    pub fn push(&mut self, g: Gaussian2D<T>, visit_threshold: u32) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.gaussians.push(g);
        self.ids.push(id);
        self.visit_thresholds.push(visit_threshold.max(1));
        self.stats.push_zeroed();
        id
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian2D<T>] {
        &self.gaussians
    }

    pub fn gaussians_mut(&mut self) -> &mut [Gaussian2D<T>] {
        &mut self.gaussians
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn visit_thresholds(&self) -> &[u32] {
        &self.visit_thresholds
    }

    pub fn visit_thresholds_mut(&mut self) -> &mut [u32] {
        &mut self.visit_thresholds
    }

    /// Keeps the Gaussians whose mask entry is `true`, compacting every
    /// parallel array in the same way.
    pub fn retain(&mut self, keep: &[bool]) -> Result<()> {
        if keep.len() != self.len() {
            return Err(invalid(format!(
                "retain mask of length {} for {} Gaussians",
                keep.len(),
                self.len()
            )));
        }
        retain_by(&mut self.gaussians, keep);
        retain_by(&mut self.ids, keep);
        retain_by(&mut self.visit_thresholds, keep);
        self.stats.retain(keep);
        Ok(())
    }

    /// Rebuilds a model from raw parts, e.g. when loading a checkpoint.
    pub fn from_parts(
        gaussians: Vec<Gaussian2D<T>>,
        ids: Vec<u64>,
        visit_thresholds: Vec<u32>,
        stats: DensifyStats<T>,
        next_id: u64,
    ) -> Result<Self> {
        let n = gaussians.len();
        if ids.len() != n
            || visit_thresholds.len() != n
            || stats.len() != n
            || stats.pos_grad_norm_accum.len() != n
            || stats.color_grad_norm_accum.len() != n
            || stats.visit_count.len() != n
            || stats.window_visits.len() != n
        {
            return Err(invalid("model parts have mismatched lengths"));
        }
        if ids.iter().any(|&id| id >= next_id) {
            return Err(invalid("model id counter is behind its ids"));
        }
        Ok(Self {
            gaussians,
            ids,
            visit_thresholds,
            stats,
            next_id,
        })
    }
}
