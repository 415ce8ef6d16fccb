//! The fitting loop.
//!
//! Iterations run in four phases: warmup (dilated, no densification), the
//! densification window (dilated, densify every `densify_interval`), a
//! refinement phase (randomly dilated or dense), and a batched finale that
//! averages gradients over `batch_size` renders per optimizer step.
//!
//! All randomness comes from one ChaCha stream. After initialization the
//! draw order is: offset coin, color-branch coin, spawn jitter.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::budget::{schedule_position, BudgetConfig, BudgetController};
use crate::densify::{self, DensifyConfig};
use crate::dilation::DilationPattern;
use crate::error::{invalid, Result, SplatError};
use crate::image::Image;
use crate::init::{init_model, kdtree_upsample, sample_seed_points, SeedPoint};
use crate::loss::{compute_loss, psnr, ssim};
use crate::model::GaussianModel;
use crate::optim::{accumulate, decayed_position_lr, LearningRates, OptimizerState};
use crate::raster::{RasterConfig, Rasterizer};
use crate::scalar::Scalar;

pub const CSV_HEADER: &str = "iteration,loss,ema_loss,psnr,count,budget,alpha,m_adaptive,blend_ops,ms";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub warmup_iters: u64,
    pub densify_interval: u64,
    pub densify_until: u64,
    pub batch_final_iters: u64,
    pub batch_size: usize,
    pub dilation_p: usize,
    pub post_densify_dilation_prob: f64,
    pub ssim_weight: f64,
    pub seed: u64,
    /// Rasterizer worker threads; 0 uses the global pool.
    pub threads: usize,
    pub log_every: u64,
    pub max_gaussians: usize,
    pub init_points: usize,
    pub upsample_rounds: usize,
    pub tau_position: f64,
    pub color_prob: f64,
    pub tau_v_init: u32,
    pub visit_gate: bool,
    pub adaptive_budget: bool,
    /// Write wall-clock milliseconds into the metrics log (zero otherwise).
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 4000,
            warmup_iters: 300,
            densify_interval: 20,
            densify_until: 3000,
            batch_final_iters: 50,
            batch_size: 4,
            dilation_p: 2,
            post_densify_dilation_prob: 0.5,
            ssim_weight: 0.2,
            seed: 0,
            threads: 0,
            log_every: 10,
            max_gaussians: 50_000,
            init_points: 500,
            upsample_rounds: 1,
            tau_position: 2e-4,
            color_prob: 0.2,
            tau_v_init: 5,
            visit_gate: true,
            adaptive_budget: true,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    /// Defaults with the phase boundaries rescaled to a run of `total` iterations.
    pub fn scaled_to(total: u64) -> Self {
        let base = Self::default();
        let scale = |v: u64| (v as f64 * total as f64 / base.total_iters as f64).round() as u64;
        let densify_until = scale(base.densify_until);
        Self {
            total_iters: total,
            warmup_iters: scale(base.warmup_iters),
            densify_until,
            batch_final_iters: base.batch_final_iters.min(total - densify_until),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation_p == 0 {
            return Err(invalid("dilation must be >= 1"));
        }
        if self.total_iters == 0 {
            return Err(invalid("iteration count must be >= 1"));
        }
        if self.warmup_iters > self.densify_until {
            return Err(invalid(format!(
                "warmup ({}) must not exceed densify-until ({})",
                self.warmup_iters, self.densify_until
            )));
        }
        if self.densify_until + self.batch_final_iters > self.total_iters {
            return Err(invalid(format!(
                "densify-until ({}) plus batch-final ({}) exceeds the {} iterations",
                self.densify_until, self.batch_final_iters, self.total_iters
            )));
        }
        if self.densify_interval == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(invalid("densify interval, batch size and log interval must be >= 1"));
        }
        for (name, p) in [
            ("post-dilation probability", self.post_densify_dilation_prob),
            ("color probability", self.color_prob),
            ("ssim weight", self.ssim_weight),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.max_gaussians == 0 || self.init_points == 0 {
            return Err(invalid("max gaussians and init points must be >= 1"));
        }
        if !(self.tau_position >= 0.0) {
            return Err(invalid(format!("tau position must be non-negative, got {}", self.tau_position)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: u64,
    pub loss: f64,
    pub ema_loss: f64,
    /// PSNR over the pixels rendered this iteration.
    pub psnr: f64,
    pub count: usize,
    pub budget: usize,
    pub alpha: f64,
    pub m_adaptive: f64,
    pub blend_ops: u64,
    /// Wall-clock milliseconds since training started.
    pub ms: f64,
}

impl IterationRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.3}",
            self.iteration,
            self.loss,
            self.ema_loss,
            self.psnr,
            self.count,
            self.budget,
            self.alpha,
            self.m_adaptive,
            self.blend_ops,
            self.ms
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyEvent {
    pub iteration: u64,
    pub t_norm: f64,
    pub budget: usize,
    pub spawned: usize,
    pub pruned: usize,
    /// Gaussian count after the event.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub initial_count: usize,
    pub records: Vec<IterationRecord>,
    pub densify_events: Vec<DensifyEvent>,
    pub final_psnr: f64,
    pub final_ssim: f64,
}

impl TrainReport {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.records {
            writeln!(out, "{}", r.csv_line())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Densify,
    Refine,
    Batch,
}

/// Complete mutable training state; everything a checkpoint has to capture.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: GaussianModel<T>,
    pub optimizer: OptimizerState<T>,
    pub controller: BudgetController,
    pub rng: ChaCha8Rng,
    /// Last completed iteration.
    pub iteration: u64,
    pub dilation_counter: u64,
    pub view_counter: u64,
    pub width: usize,
    pub height: usize,
}

pub struct Trainer<T> {
    config: TrainConfig,
    targets: Vec<Image<T>>,
    densify: DensifyConfig<T>,
    raster: Rasterizer<T>,
    base_position_lr: T,
    /// Pixel-to-normalized-coordinate factors applied to positional
    /// gradients before they are compared with `tau_position`.
    ndc_scale: [T; 2],
    state: TrainState<T>,
    report: TrainReport,
    started: Instant,
}

impl<T: Scalar> Trainer<T> {
    /// Builds the initial model from `seeds` (sampled from the first target
    /// when absent), upsampled `upsample_rounds` times.
    pub fn new(config: TrainConfig, targets: Vec<Image<T>>, seeds: Option<Vec<SeedPoint>>) -> Result<Self> {
        config.validate()?;
        let first = targets.first().ok_or_else(|| invalid("at least one target image is required"))?;
        if targets.iter().any(|t| !t.same_size(first)) {
            return Err(invalid("all target images must share one size"));
        }
        let (width, height) = (first.width(), first.height());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let seeds = match seeds {
            Some(s) => s,
            None => sample_seed_points(first, config.init_points.min(width * height), &mut rng)?,
        };
        let seeds = kdtree_upsample(&seeds, config.upsample_rounds);
        let model = init_model(&seeds, first, config.tau_v_init, &mut rng)?;
        if model.len() > config.max_gaussians {
            return Err(invalid(format!(
                "initial model of {} Gaussians exceeds max gaussians {}",
                model.len(),
                config.max_gaussians
            )));
        }

        let mut budget_cfg = BudgetConfig::new(model.len(), config.max_gaussians);
        budget_cfg.adaptive = config.adaptive_budget;
        let controller = BudgetController::new(budget_cfg)?;
        let mut densify = DensifyConfig::new(T::lit(config.tau_position), config.color_prob, config.tau_v_init, targets.len())?;
        densify.visit_gate = config.visit_gate;
        let lr = LearningRates::for_image(first.diagonal());
        let raster = Rasterizer::new(RasterConfig::default(), config.threads)?;
        let report = TrainReport {
            initial_count: model.len(),
            ..TrainReport::default()
        };
        Ok(Self {
            base_position_lr: lr.position,
            ndc_scale: [T::from_index(width) * T::lit(0.5), T::from_index(height) * T::lit(0.5)],
            state: TrainState {
                optimizer: OptimizerState::new(model.len(), lr),
                model,
                controller,
                rng,
                iteration: 0,
                dilation_counter: 0,
                view_counter: 0,
                width,
                height,
            },
            config,
            targets,
            densify,
            raster,
            report,
            started: Instant::now(),
        })
    }

    /// Replaces the training state, e.g. with one restored from a checkpoint.
    pub fn restore(&mut self, state: TrainState<T>) -> Result<()> {
        if (state.width, state.height) != (self.state.width, self.state.height) {
            return Err(invalid("restored state was trained on a different image size"));
        }
        if state.optimizer.len() != state.model.len() {
            return Err(invalid("restored optimizer and model disagree in size"));
        }
        self.state = state;
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn densify_config_mut(&mut self) -> &mut DensifyConfig<T> {
        &mut self.densify
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn model(&self) -> &GaussianModel<T> {
        &self.state.model
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn rasterizer(&self) -> &Rasterizer<T> {
        &self.raster
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.config.total_iters
    }

    pub fn phase_of(&self, iteration: u64) -> Phase {
        let c = &self.config;
        if iteration <= c.warmup_iters {
            Phase::Warmup
        } else if iteration <= c.densify_until {
            Phase::Densify
        } else if iteration <= c.total_iters - c.batch_final_iters {
            Phase::Refine
        } else {
            Phase::Batch
        }
    }

    /// Current scheduled budget.
    pub fn budget(&self) -> usize {
        let c = &self.config;
        let t = schedule_position(self.state.iteration, c.warmup_iters, c.densify_until);
        self.state.controller.budget_at(t)
    }

    fn next_dilated(&mut self) -> Result<DilationPattern> {
        let p = DilationPattern::cycled(self.config.dilation_p, self.state.dilation_counter, self.state.width, self.state.height)?;
        self.state.dilation_counter += 1;
        Ok(p)
    }

    fn next_target(&mut self) -> usize {
        let v = (self.state.view_counter % self.targets.len() as u64) as usize;
        self.state.view_counter += 1;
        v
    }

    /// Runs one iteration. Does nothing once all iterations are done.
    pub fn step(&mut self) -> Result<()> {
        if self.is_done() {
            return Ok(());
        }
        let iteration = self.state.iteration + 1;
        let phase = self.phase_of(iteration);
        let renders = if phase == Phase::Batch { self.config.batch_size } else { 1 };
        // A batch whose cycled offsets cover the whole grid sees every pixel,
        // so it is fitted against the unfiltered model.
        let p = self.config.dilation_p;
        let batch_dense = phase == Phase::Batch && renders >= p * p;

        let mut grads = Vec::with_capacity(renders);
        let mut loss_sum = T::zero();
        let mut sq_err = 0.0;
        let mut samples = 0usize;
        let mut blend_ops = 0;
        for _ in 0..renders {
            let pattern = match phase {
                Phase::Warmup | Phase::Densify | Phase::Batch => self.next_dilated()?,
                Phase::Refine => {
                    if self.state.rng.gen::<f64>() < self.config.post_densify_dilation_prob {
                        self.next_dilated()?
                    } else {
                        DilationPattern::dense(self.state.width, self.state.height)?
                    }
                }
            };
            let view = self.next_target();
            let target = &self.targets[view];
            let lowpass = if batch_dense { 1 } else { pattern.pattern_size() };
            let out = self.raster.render_with_lowpass(&self.state.model, &pattern, lowpass)?;
            let (loss, pixel_grads) = compute_loss(&out, target, &pattern, T::lit(self.config.ssim_weight))?;
            for (rank, (x, y)) in pattern.active_pixels().enumerate() {
                let t = target.get(x, y);
                for c in 0..3 {
                    sq_err += (out.colors[rank][c] - t[c]).as_f64().powi(2);
                }
            }
            samples += out.colors.len() * 3;
            let back = self.raster.backward_with_lowpass(&self.state.model, &pattern, &pixel_grads, lowpass)?;
            blend_ops += out.blend_op_count + back.blend_op_count;
            if phase == Phase::Densify {
                self.state.model.stats.record_scaled(&back.grads, &back.visited, self.ndc_scale)?;
            }
            loss_sum += loss;
            grads.push(back.grads);
        }
        let grads = if grads.len() == 1 { grads.pop().unwrap() } else { accumulate(&grads)? };
        let loss = (loss_sum / T::from_index(renders)).as_f64();
        if !loss.is_finite() {
            return Err(SplatError::NumericalDegeneracy(format!("loss became {loss} at iteration {iteration}")));
        }

        let opt = &mut self.state.optimizer;
        opt.lr.position = decayed_position_lr(self.base_position_lr, iteration, self.config.total_iters);
        let max_scale = self.targets[0].diagonal();
        opt.step(&mut self.state.model, &grads, max_scale)?;
        self.state.controller.record_loss(iteration, loss.max(f64::MIN_POSITIVE))?;
        self.state.iteration = iteration;

        if phase == Phase::Densify {
            if iteration % self.densify.n_views as u64 == 0 {
                densify::update_visit_thresholds(&mut self.state.model);
            }
            if (iteration - self.config.warmup_iters) % self.config.densify_interval == 0 {
                self.densify_event(iteration)?;
            }
        }

        if iteration % self.config.log_every == 0 || iteration == self.config.total_iters {
            let mse = sq_err / samples.max(1) as f64;
            let c = &self.state.controller;
            self.report.records.push(IterationRecord {
                iteration,
                loss,
                ema_loss: c.ema().unwrap_or(loss),
                psnr: if mse == 0.0 { crate::loss::PSNR_CAP } else { (-10.0 * mse.log10()).min(crate::loss::PSNR_CAP) },
                count: self.state.model.len(),
                budget: self.budget(),
                alpha: c.alpha(),
                m_adaptive: c.m_adaptive(),
                blend_ops,
                ms: if self.config.record_timing { self.started.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
            });
        }
        Ok(())
    }

    fn densify_event(&mut self, iteration: u64) -> Result<()> {
        let c = &self.config;
        let t_norm = schedule_position(iteration, c.warmup_iters, c.densify_until);
        self.state.controller.update(iteration);
        let budget = self.state.controller.budget_at(t_norm);
        let st = &mut self.state;

        let candidates = densify::select_candidates(&st.model, &self.densify, &mut st.rng)?;
        let room = budget.saturating_sub(st.model.len());
        let spawned = densify::spawn(&mut st.model, &candidates, room, &self.densify, &mut st.rng)?;
        st.optimizer.grow(spawned.spawned());
        let pruned = densify::prune(&mut st.model, self.densify.opacity_prune_floor)?;
        st.optimizer.retain(&pruned.keep)?;
        let culled = densify::enforce_budget(&mut st.model, budget)?;
        st.optimizer.retain(&culled.keep)?;

        if st.model.len() > budget {
            return Err(invalid(format!("{} Gaussians exceed the budget {budget}", st.model.len())));
        }
        self.report.densify_events.push(DensifyEvent {
            iteration,
            t_norm,
            budget,
            spawned: spawned.spawned(),
            pruned: pruned.removed + culled.removed,
            count: st.model.len(),
        });
        Ok(())
    }

    /// Dense render of the model with the undilated low-pass filter.
    pub fn render_dense(&self) -> Result<Image<T>> {
        self.raster.render_image(&self.state.model, self.state.width, self.state.height, 1)
    }

    /// Mean PSNR and SSIM of dense renders against every target.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let render = self.render_dense()?;
        let mut p = 0.0;
        let mut s = 0.0;
        for t in &self.targets {
            p += psnr(&render, t)?;
            s += ssim(&render, t)?;
        }
        let n = self.targets.len() as f64;
        Ok((p / n, s / n))
    }

    /// Runs the remaining iterations and fills in the final metrics.
    pub fn run(&mut self) -> Result<&TrainReport> {
        while !self.is_done() {
            self.step()?;
        }
        let (p, s) = self.evaluate()?;
        self.report.final_psnr = p;
        self.report.final_ssim = s;
        Ok(&self.report)
    }

    pub fn into_parts(self) -> (TrainState<T>, TrainReport) {
        (self.state, self.report)
    }
}

/// Trains on a single target from scratch.
pub fn train<T: Scalar>(
    config: TrainConfig,
    target: &Image<T>,
    seeds: Option<Vec<SeedPoint>>,
) -> Result<(GaussianModel<T>, TrainReport)> {
    let mut trainer = Trainer::new(config, vec![target.clone()], seeds)?;
    trainer.run()?;
    let (state, report) = trainer.into_parts();
    Ok((state.model, report))
}
