//! Adaptive-moment parameter updates and batched gradient accumulation.

use crate::error::{invalid, Result};
use crate::model::{retain_by, GaussianModel};
use crate::raster::{GaussianGrad, GradientSet};
use crate::scalar::Scalar;
use crate::splat::PARAM_COUNT;

/// Per-group base learning rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates<T> {
    pub position: T,
    pub rotation: T,
    pub log_scales: T,
    pub raw_opacity: T,
    pub color: T,
}

impl<T: Scalar> LearningRates<T> {
    /// Defaults for an image with the given diagonal (pixels).
    pub fn for_image(diagonal: T) -> Self {
        Self {
            position: T::lit(1.6e-4) * diagonal,
            rotation: T::lit(1e-3),
            log_scales: T::lit(5e-3),
            raw_opacity: T::lit(5e-2),
            color: T::lit(2.5e-3),
        }
    }

    fn per_param(&self) -> [T; PARAM_COUNT] {
        [
            self.position,
            self.position,
            self.rotation,
            self.log_scales,
            self.log_scales,
            self.raw_opacity,
            self.color,
            self.color,
            self.color,
        ]
    }
}

/// Position learning rate decayed exponentially to 1% of `initial` over `total` steps.
pub fn decayed_position_lr<T: Scalar>(initial: T, step: u64, total: u64) -> T {
    let frac = if total == 0 { 1.0 } else { (step as f64 / total as f64).min(1.0) };
    initial * T::lit(0.01f64.powf(frac))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub lr: LearningRates<T>,
    first_moment: Vec<[T; PARAM_COUNT]>,
    second_moment: Vec<[T; PARAM_COUNT]>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(n: usize, lr: LearningRates<T>) -> Self {
        Self {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-15),
            lr,
            first_moment: vec![[T::zero(); PARAM_COUNT]; n],
            second_moment: vec![[T::zero(); PARAM_COUNT]; n],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[[T; PARAM_COUNT]], &[[T; PARAM_COUNT]]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Rebuilds a state from saved parts.
    pub fn from_parts(
        lr: LearningRates<T>,
        first_moment: Vec<[T; PARAM_COUNT]>,
        second_moment: Vec<[T; PARAM_COUNT]>,
        step: u64,
    ) -> Result<Self> {
        if first_moment.len() != second_moment.len() {
            return Err(invalid("moment buffers differ in length"));
        }
        let mut state = Self::new(0, lr);
        state.first_moment = first_moment;
        state.second_moment = second_moment;
        state.step = step;
        Ok(state)
    }

    /// Appends zeroed moments for `n` newly spawned Gaussians.
    pub fn grow(&mut self, n: usize) {
        let len = self.len() + n;
        self.first_moment.resize(len, [T::zero(); PARAM_COUNT]);
        self.second_moment.resize(len, [T::zero(); PARAM_COUNT]);
    }

    pub fn retain(&mut self, keep: &[bool]) -> Result<()> {
        if keep.len() != self.len() {
            return Err(invalid(format!(
                "retain mask of length {} for {} moment rows",
                keep.len(),
                self.len()
            )));
        }
        retain_by(&mut self.first_moment, keep);
        retain_by(&mut self.second_moment, keep);
        Ok(())
    }

    /// One update of every parameter, followed by the scale and raw-value clamps.
    pub fn step(&mut self, model: &mut GaussianModel<T>, grads: &GradientSet<T>, max_scale: T) -> Result<()> {
        if grads.len() != model.len() || self.len() != model.len() {
            return Err(invalid(format!(
                "optimizer with {} rows, {} gradients, {} Gaussians",
                self.len(),
                grads.len(),
                model.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let one = T::one();
        let bias1 = one - T::lit(self.beta1.as_f64().powf(t));
        let bias2 = one - T::lit(self.beta2.as_f64().powf(t));
        let lrs = self.lr.per_param();
        for (i, g) in model.gaussians_mut().iter_mut().enumerate() {
            let grad = grads[i].to_params();
            let mut params = g.params();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for k in 0..PARAM_COUNT {
                m[k] = self.beta1 * m[k] + (one - self.beta1) * grad[k];
                v[k] = self.beta2 * v[k] + (one - self.beta2) * grad[k] * grad[k];
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                params[k] -= lrs[k] * m_hat / (v_hat.sqrt() + self.eps);
            }
            g.set_params(&params);
            g.clamp(max_scale);
        }
        Ok(())
    }
}

/// Componentwise mean of gradient sets taken against the same model snapshot.
pub fn accumulate<T: Scalar>(batch: &[GradientSet<T>]) -> Result<GradientSet<T>> {
    let first = batch.first().ok_or_else(|| invalid("cannot accumulate an empty batch"))?;
    if batch.iter().any(|g| g.len() != first.len()) {
        return Err(invalid("gradient sets in a batch differ in length"));
    }
    let scale = T::one() / T::from_index(batch.len());
    let mut sums = vec![[T::zero(); PARAM_COUNT]; first.len()];
    for set in batch {
        for (sum, g) in sums.iter_mut().zip(set.iter()) {
            for (s, v) in sum.iter_mut().zip(g.to_params()) {
                *s += v;
            }
        }
    }
    Ok(GradientSet(
        sums.iter()
            .map(|s| GaussianGrad::from_params(&s.map(|v| v * scale)))
            .collect(),
    ))
}
