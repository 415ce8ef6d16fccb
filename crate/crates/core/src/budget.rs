//! Convergence-aware Gaussian budget.
//!
//! The smoothed loss is assumed to follow `L(t) ∝ t^(-α)`. Periodically the
//! exponent is refitted in log-log space over the whole history and over a
//! recent window; the disagreement between the two steers the growth
//! exponent of the budget curve, and the local decline rate stretches or
//! shrinks its ceiling.

use std::collections::VecDeque;

use crate::error::{invalid, Result, SplatError};

pub const EMA_WEIGHT: f64 = 0.1;
pub const ALPHA_RANGE: (f64, f64) = (0.1, 2.0);
/// Local decline rate beyond which the ceiling moves.
pub const RATE_DEADBAND: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetConfig {
    pub n_init: usize,
    pub m_final: usize,
    pub warmup_steps: u64,
    pub refit_interval: u64,
    pub window_size: usize,
    /// Number of recent fitted exponents averaged into `alpha_base`.
    pub history_depth: usize,
    pub lambda: f64,
    /// When false the schedule stays linear with a fixed ceiling.
    pub adaptive: bool,
}

impl BudgetConfig {
    pub fn new(n_init: usize, m_final: usize) -> Self {
        Self {
            n_init,
            m_final,
            warmup_steps: 100,
            refit_interval: 100,
            window_size: 200,
            history_depth: 5,
            lambda: 0.5,
            adaptive: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetController {
    pub(crate) cfg: BudgetConfig,
    pub(crate) m_adaptive: f64,
    pub(crate) alpha: f64,
    pub(crate) alpha_base: f64,
    pub(crate) fitted: VecDeque<f64>,
    pub(crate) ema: Option<f64>,
    pub(crate) loss_log: Vec<(f64, f64)>,
    pub(crate) last_refit: Option<u64>,
}

impl BudgetController {
    pub fn new(cfg: BudgetConfig) -> Result<Self> {
        if cfg.m_final == 0 {
            return Err(invalid("maximum Gaussian count must be >= 1"));
        }
        if cfg.window_size < 2 || cfg.history_depth == 0 || cfg.refit_interval == 0 {
            return Err(invalid("budget window, history depth and refit interval must be positive"));
        }
        Ok(Self {
            cfg,
            m_adaptive: cfg.m_final as f64,
            alpha: 1.0,
            alpha_base: 1.0,
            fitted: VecDeque::new(),
            ema: None,
            loss_log: Vec::new(),
            last_refit: None,
        })
    }

    pub fn config(&self) -> &BudgetConfig {
        &self.cfg
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn alpha_base(&self) -> f64 {
        self.alpha_base
    }

    pub fn m_adaptive(&self) -> f64 {
        self.m_adaptive
    }

    pub fn ema(&self) -> Option<f64> {
        self.ema
    }

    pub fn loss_log(&self) -> &[(f64, f64)] {
        &self.loss_log
    }

    pub fn record_loss(&mut self, t: u64, loss: f64) -> Result<()> {
        if !(loss > 0.0) || !loss.is_finite() {
            return Err(invalid(format!("loss must be positive and finite, got {loss}")));
        }
        let ema = match self.ema {
            None => loss,
            Some(prev) => EMA_WEIGHT * loss + (1.0 - EMA_WEIGHT) * prev,
        };
        self.ema = Some(ema);
        if t > self.cfg.warmup_steps {
            self.loss_log.push((t as f64, ema));
        }
        Ok(())
    }

    /// Refits when at least `refit_interval` iterations have passed since the
    /// previous fit. Returns the current `(alpha, m_adaptive)` either way.
    pub fn update(&mut self, t: u64) -> (f64, f64) {
        let due = self.last_refit.is_none_or(|last| t >= last + self.cfg.refit_interval);
        if self.cfg.adaptive && t > self.cfg.warmup_steps && due && self.refit().is_ok() {
            self.last_refit = Some(t);
        }
        (self.alpha, self.m_adaptive)
    }

    /// Unconditional refit. Leaves the state untouched on failure.
    pub fn refit(&mut self) -> Result<()> {
        let history = fit_power_exponent(&self.loss_log)?;
        let start = self.loss_log.len().saturating_sub(self.cfg.window_size);
        let recent = fit_power_exponent(&self.loss_log[start..])?;

        self.fitted.push_back(history);
        while self.fitted.len() > self.cfg.history_depth {
            self.fitted.pop_front();
        }
        self.alpha_base = self.fitted.iter().sum::<f64>() / self.fitted.len() as f64;
        self.apply_rate(recent);
        let epsilon = recent - history;
        self.alpha = (self.alpha_base + self.cfg.lambda * epsilon.tanh()).clamp(ALPHA_RANGE.0, ALPHA_RANGE.1);
        Ok(())
    }

    /// Ceiling adjustment for a local decline rate.
    pub fn apply_rate(&mut self, rate: f64) {
        let m = self.cfg.m_final as f64;
        if rate > RATE_DEADBAND {
            self.m_adaptive = (self.m_adaptive * 1.1).min(1.5 * m);
        } else if rate < -RATE_DEADBAND {
            self.m_adaptive = (self.m_adaptive * 0.9).max(0.5 * m);
        }
    }

    pub fn budget_at(&self, t_norm: f64) -> usize {
        budget_curve(self.cfg.n_init, self.m_adaptive, self.alpha, t_norm)
    }
}

/// `N + (t^α − 1)/(100^α − 1)·(M − N)` rounded, with `t` clamped to [1, 100].
pub fn budget_curve(n_init: usize, ceiling: f64, alpha: f64, t_norm: f64) -> usize {
    let t = if t_norm.is_nan() { 1.0 } else { t_norm.clamp(1.0, 100.0) };
    let frac = (t.powf(alpha) - 1.0) / (100f64.powf(alpha) - 1.0);
    let n = n_init as f64;
    (n + frac * (ceiling - n)).round().max(0.0) as usize
}

/// Maps an iteration onto the [1, 100] schedule axis spanning warmup to the
/// end of densification.
pub fn schedule_position(step: u64, warmup: u64, densify_end: u64) -> f64 {
    if densify_end <= warmup {
        return 100.0;
    }
    let frac = (step as f64 - warmup as f64) / (densify_end - warmup) as f64;
    (1.0 + 99.0 * frac).clamp(1.0, 100.0)
}

/// The `α` of `loss ∝ t^(-α)`: the negated least-squares slope of
/// `ln loss` against `ln t`.
pub fn fit_power_exponent(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.iter().any(|&(t, l)| !(t > 0.0) || !(l > 0.0)) {
        return Err(invalid("power-law fit needs positive iterations and losses"));
    }
    let n = pairs.len() as f64;
    let xs = || pairs.iter().map(|&(t, _)| t.ln());
    let ys = || pairs.iter().map(|&(_, l)| l.ln());
    let mx = xs().sum::<f64>() / n;
    let my = ys().sum::<f64>() / n;
    let sxx: f64 = xs().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs().zip(ys()).map(|(x, y)| (x - mx) * (y - my)).sum();
    if pairs.len() < 2 || sxx <= 0.0 {
        return Err(SplatError::InsufficientData(format!(
            "power-law fit needs two distinct iterations, got {} pairs",
            pairs.len()
        )));
    }
    Ok(-(sxy / sxx))
}
