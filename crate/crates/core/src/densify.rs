//! Where to add and remove Gaussians.
//!
//! A Gaussian may spawn a child only if it has been visited more often than
//! its own visit threshold, its opacity clears the mask floor, and either its
//! averaged positional gradient exceeds `tau_position` or, on events where the
//! color branch is switched on, its averaged color gradient exceeds
//! `tau_color = 0.01 * tau_position`.

use std::f64::consts::{LN_2, TAU};

use rand::Rng;

use crate::error::{invalid, Result};
use crate::model::GaussianModel;
use crate::scalar::Scalar;
use crate::splat::{logit, Gaussian2D};

/// Audit windows with fewer visits than this halve the Gaussian's threshold.
pub const MIN_WINDOW_VISITS: u32 = 5;

/// Activated opacity of freshly spawned children.
pub const CHILD_OPACITY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyConfig<T> {
    tau_position: T,
    tau_color: T,
    pub color_branch_prob: f64,
    pub opacity_mask_floor: T,
    pub opacity_prune_floor: T,
    pub tau_v_init: u32,
    pub n_views: usize,
    /// When false every Gaussian passes the visit gate.
    pub visit_gate: bool,
}

impl<T: Scalar> Default for DensifyConfig<T> {
    fn default() -> Self {
        Self::new(T::lit(2e-4), 0.2, 5, 1).expect("default densify config is valid")
    }
}

impl<T: Scalar> DensifyConfig<T> {
    pub fn new(tau_position: T, color_branch_prob: f64, tau_v_init: u32, n_views: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&color_branch_prob) {
            return Err(invalid(format!("color branch probability {color_branch_prob} outside [0, 1]")));
        }
        if !(tau_position >= T::zero()) {
            return Err(invalid(format!("tau_position must be non-negative, got {tau_position}")));
        }
        if n_views == 0 {
            return Err(invalid("n_views must be >= 1"));
        }
        Ok(Self {
            tau_position,
            tau_color: T::lit(0.01) * tau_position,
            color_branch_prob,
            opacity_mask_floor: T::lit(0.05),
            opacity_prune_floor: T::lit(0.005),
            tau_v_init: tau_v_init.max(1),
            n_views,
            visit_gate: true,
        })
    }

    pub fn tau_position(&self) -> T {
        self.tau_position
    }

    pub fn tau_color(&self) -> T {
        self.tau_color
    }

    pub fn set_tau_position(&mut self, tau: T) {
        self.tau_position = tau;
        self.tau_color = T::lit(0.01) * tau;
    }
}

/// Draws the per-event color coin, then gates every Gaussian.
pub fn select_candidates<T: Scalar, R: Rng + ?Sized>(
    model: &GaussianModel<T>,
    cfg: &DensifyConfig<T>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let color_active = rng.gen::<f64>() < cfg.color_branch_prob;
    select_candidates_with_coin(model, cfg, color_active)
}

/// Candidate gating with the color coin already decided.
pub fn select_candidates_with_coin<T: Scalar>(
    model: &GaussianModel<T>,
    cfg: &DensifyConfig<T>,
    color_active: bool,
) -> Result<Vec<usize>> {
    let stats = &model.stats;
    if stats.len() != model.len() {
        return Err(invalid("densify statistics are not aligned with the model"));
    }
    let thresholds = model.visit_thresholds();
    Ok((0..model.len())
        .filter(|&i| {
            let (Some(pos), Some(color)) = (stats.mean_pos_grad(i), stats.mean_color_grad(i)) else {
                return false;
            };
            (!cfg.visit_gate || stats.visit_count[i] > thresholds[i])
                && model.gaussians()[i].opacity() >= cfg.opacity_mask_floor
                && (pos > cfg.tau_position || (color_active && color > cfg.tau_color))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SpawnReport {
    /// Parent indices in the order their children were appended.
    pub parents: Vec<usize>,
    pub child_ids: Vec<u64>,
}

impl SpawnReport {
    pub fn spawned(&self) -> usize {
        self.parents.len()
    }
}

/// Spawns one half-size child per selected parent, keeping the
/// `budget_remaining` candidates with the largest averaged positional
/// gradients. Clears the gradient accumulators of every Gaussian afterwards.
pub fn spawn<T: Scalar, R: Rng + ?Sized>(
    model: &mut GaussianModel<T>,
    candidates: &[usize],
    budget_remaining: usize,
    cfg: &DensifyConfig<T>,
    rng: &mut R,
) -> Result<SpawnReport> {
    if budget_remaining == 0 {
        return Ok(SpawnReport::default());
    }
    if let Some(&bad) = candidates.iter().find(|&&i| i >= model.len()) {
        return Err(invalid(format!("candidate {bad} out of range")));
    }
    let mut ranked: Vec<(T, usize)> = candidates
        .iter()
        .map(|&i| (model.stats.mean_pos_grad(i).unwrap_or_else(T::zero), i))
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    ranked.truncate(budget_remaining);

    let mut report = SpawnReport::default();
    let child_raw_opacity = logit(T::lit(CHILD_OPACITY));
    let half = T::lit(LN_2);
    for &(_, parent_index) in &ranked {
        let parent = model.gaussians()[parent_index];
        let child = Gaussian2D {
            position: point_in_unit_sigma_ellipse(&parent, rng),
            rotation: parent.rotation,
            log_scales: parent.log_scales.map(|s| s - half),
            raw_opacity: child_raw_opacity,
            raw_color: parent.raw_color,
            depth_key: T::lit(rng.gen::<f64>()),
        };
        report.child_ids.push(model.push(child, cfg.tau_v_init));
        report.parents.push(parent_index);
    }
    model.stats.reset_accumulators();
    Ok(report)
}

/// Uniform sample inside the parent's 1σ ellipse.
fn point_in_unit_sigma_ellipse<T: Scalar, R: Rng + ?Sized>(g: &Gaussian2D<T>, rng: &mut R) -> [T; 2] {
    let r = rng.gen::<f64>().sqrt();
    let theta = TAU * rng.gen::<f64>();
    let (zx, zy) = (T::lit(r * theta.cos()), T::lit(r * theta.sin()));
    let [s0, s1] = g.scales();
    let (sin, cos) = g.rotation.sin_cos();
    [
        g.position[0] + cos * s0 * zx - sin * s1 * zy,
        g.position[1] + sin * s0 * zx + cos * s1 * zy,
    ]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneReport {
    pub removed: usize,
    /// Retention mask over the pre-prune indices; apply it to any other
    /// per-Gaussian array (optimizer moments) to stay aligned.
    pub keep: Vec<bool>,
}

/// Removes every Gaussian whose activated opacity is below `opacity_prune_floor`.
pub fn prune<T: Scalar>(model: &mut GaussianModel<T>, opacity_prune_floor: T) -> Result<PruneReport> {
    let keep: Vec<bool> = model
        .gaussians()
        .iter()
        .map(|g| g.opacity() >= opacity_prune_floor)
        .collect();
    apply_keep(model, keep)
}

/// Removes the least opaque Gaussians (ties: higher index first) until at most
/// `budget` remain.
pub fn enforce_budget<T: Scalar>(model: &mut GaussianModel<T>, budget: usize) -> Result<PruneReport> {
    let n = model.len();
    let mut keep = vec![true; n];
    if n > budget {
        let mut order: Vec<usize> = (0..n).collect();
        let opacity: Vec<f64> = model.gaussians().iter().map(|g| g.opacity().as_f64()).collect();
        order.sort_by(|&a, &b| opacity[a].total_cmp(&opacity[b]).then(b.cmp(&a)));
        for &i in &order[..n - budget] {
            keep[i] = false;
        }
    }
    apply_keep(model, keep)
}

fn apply_keep<T: Scalar>(model: &mut GaussianModel<T>, keep: Vec<bool>) -> Result<PruneReport> {
    let removed = keep.iter().filter(|k| !**k).count();
    if removed > 0 {
        model.retain(&keep)?;
    }
    Ok(PruneReport { removed, keep })
}

/// Visit-threshold audit: halves (floored at 1) the threshold of every
/// Gaussian visited fewer than [`MIN_WINDOW_VISITS`] times in the window that
/// just ended, then opens a new window.
pub fn update_visit_thresholds<T: Scalar>(model: &mut GaussianModel<T>) {
    let window: Vec<u32> = model.stats.window_visits.clone();
    for (tau, visits) in model.visit_thresholds_mut().iter_mut().zip(window) {
        if visits < MIN_WINDOW_VISITS {
            *tau = (*tau / 2).max(1);
        }
    }
    model.stats.reset_window();
}
