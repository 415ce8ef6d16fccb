//! Blend-op and wall-clock measurements of dilated rendering.

use std::time::Instant;

use crate::dilation::DilationPattern;
use crate::error::{Result, SplatError};
use crate::model::GaussianModel;
use crate::raster::Rasterizer;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub pattern_size: usize,
    pub forward_ops: u64,
    pub backward_ops: u64,
    /// Median forward+backward wall time over the repeats, in milliseconds.
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    fn row(&self, p: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.pattern_size == p)
    }

    /// Forward blend ops at `p` relative to `p = 1`.
    pub fn op_ratio(&self, p: usize) -> Option<f64> {
        let base = self.row(1)?.forward_ops;
        (base > 0).then(|| self.row(p).map(|r| r.forward_ops as f64 / base as f64))?
    }

    /// Forward+backward wall-clock speedup at `p` over `p = 1`.
    pub fn speedup(&self, p: usize) -> Option<f64> {
        let row = self.row(p)?;
        (row.millis > 0.0).then(|| self.row(1).map(|b| b.millis / row.millis))?
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("p,forward_ops,backward_ops,ms,op_ratio,speedup\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.3},{:.4},{:.3}\n",
                r.pattern_size,
                r.forward_ops,
                r.backward_ops,
                r.millis,
                self.op_ratio(r.pattern_size).unwrap_or(f64::NAN),
                self.speedup(r.pattern_size).unwrap_or(f64::NAN),
            ));
        }
        s
    }
}

/// Renders and back-propagates `model` at each pattern size (offset 0),
/// `repeats` times each. Pixel gradients are a constant unit vector.
pub fn bench<T: Scalar>(
    raster: &Rasterizer<T>,
    model: &GaussianModel<T>,
    width: usize,
    height: usize,
    sizes: &[usize],
    repeats: usize,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(SplatError::InvalidParameter("repeats must be >= 1".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &p in sizes {
        let pattern = DilationPattern::cycled(p, 0, width, height)?;
        let grads = vec![[T::one(); 3]; pattern.active_count()];
        let mut times = Vec::with_capacity(repeats);
        let (mut forward_ops, mut backward_ops) = (0, 0);
        for _ in 0..repeats {
            let start = Instant::now();
            let out = raster.render(model, &pattern)?;
            let back = raster.backward(model, &pattern, &grads)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            forward_ops = out.blend_op_count;
            backward_ops = back.blend_op_count;
        }
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            pattern_size: p,
            forward_ops,
            backward_ops,
            millis: times[times.len() / 2],
        });
    }
    Ok(BenchReport { rows })
}
