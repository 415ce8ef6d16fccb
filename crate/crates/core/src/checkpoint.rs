//! Binary training-state checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "TGS1" | u32 version | u64 count | u64 optimizer step        (24 bytes)
//! f32 arrays: position[2n] rotation[n] log_scales[2n] raw_opacity[n] color[3n] depth_key[n]
//! f32 first moments[9n], second moments[9n], learning rates[5]
//! u64 ids[n], u32 visit thresholds[n]
//! f32 pos/color grad accumulators[n each], u32 accum/visit/window counts[n each], u64 next id
//! budget controller, trainer counters, ChaCha seed/stream/word position
//! ```
//!
//! Parameters and moments are stored as 32-bit floats in every compute mode.

use std::collections::VecDeque;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::budget::{BudgetConfig, BudgetController};
use crate::error::{Result, SplatError};
use crate::model::{DensifyStats, GaussianModel};
use crate::optim::{LearningRates, OptimizerState};
use crate::scalar::Scalar;
use crate::splat::{Gaussian2D, PARAM_COUNT};
use crate::train::TrainState;

pub const MAGIC: &[u8; 4] = b"TGS1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

fn corrupt(msg: impl Into<String>) -> SplatError {
    SplatError::CorruptCheckpoint(msg.into())
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32<T: Scalar>(&mut self, v: T) {
        self.bytes(&(v.as_f64() as f32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            corrupt(format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f32<T: Scalar>(&mut self) -> Result<T> {
        Ok(T::lit(f32::from_le_bytes(self.array()?) as f64))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(corrupt(format!("invalid flag byte {b}"))),
        }
    }
    /// A length prefix, rejected early when the remaining bytes cannot hold
    /// `len` items of `item_size` bytes.
    fn len(&mut self, item_size: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(item_size as u64) > remaining {
            return Err(corrupt(format!("length {n} exceeds the remaining {remaining} bytes")));
        }
        Ok(n as usize)
    }
    fn vec<V>(&mut self, n: usize, mut f: impl FnMut(&mut Self) -> Result<V>) -> Result<Vec<V>> {
        (0..n).map(|_| f(self)).collect()
    }
}

pub fn encode<T: Scalar>(state: &TrainState<T>) -> Vec<u8> {
    let mut w = Writer::default();
    let model = &state.model;
    let gs = model.gaussians();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.len(gs.len());
    w.u64(state.optimizer.step_count());

    gs.iter().for_each(|g| g.position.iter().for_each(|&v| w.f32(v)));
    gs.iter().for_each(|g| w.f32(g.rotation));
    gs.iter().for_each(|g| g.log_scales.iter().for_each(|&v| w.f32(v)));
    gs.iter().for_each(|g| w.f32(g.raw_opacity));
    gs.iter().for_each(|g| g.raw_color.iter().for_each(|&v| w.f32(v)));
    gs.iter().for_each(|g| w.f32(g.depth_key));

    let (m, v) = state.optimizer.moments();
    m.iter().chain(v).for_each(|row| row.iter().for_each(|&x| w.f32(x)));
    let lr = &state.optimizer.lr;
    for x in [lr.position, lr.rotation, lr.log_scales, lr.raw_opacity, lr.color] {
        w.f32(x);
    }

    model.ids().iter().for_each(|&id| w.u64(id));
    model.visit_thresholds().iter().for_each(|&t| w.u32(t));
    let st = &model.stats;
    st.pos_grad_norm_accum.iter().for_each(|&x| w.f32(x));
    st.color_grad_norm_accum.iter().for_each(|&x| w.f32(x));
    for counts in [&st.accum_count, &st.visit_count, &st.window_visits] {
        counts.iter().for_each(|&c| w.u32(c));
    }
    w.u64(model.next_id());

    let c = &state.controller;
    let cfg = &c.cfg;
    for x in [cfg.n_init, cfg.m_final] {
        w.len(x);
    }
    w.u64(cfg.warmup_steps);
    w.u64(cfg.refit_interval);
    w.len(cfg.window_size);
    w.len(cfg.history_depth);
    w.f64(cfg.lambda);
    w.u8(cfg.adaptive as u8);
    w.f64(c.m_adaptive);
    w.f64(c.alpha);
    w.f64(c.alpha_base);
    w.len(c.fitted.len());
    c.fitted.iter().for_each(|&x| w.f64(x));
    w.u8(c.ema.is_some() as u8);
    w.f64(c.ema.unwrap_or(0.0));
    w.len(c.loss_log.len());
    c.loss_log.iter().for_each(|&(t, l)| {
        w.f64(t);
        w.f64(l);
    });
    w.u8(c.last_refit.is_some() as u8);
    w.u64(c.last_refit.unwrap_or(0));

    w.u64(state.iteration);
    w.u64(state.dilation_counter);
    w.u64(state.view_counter);
    w.len(state.width);
    w.len(state.height);

    w.bytes(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.bytes(&state.rng.get_word_pos().to_le_bytes());
    w.0
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<TrainState<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| corrupt("file shorter than the magic"))? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    // Smallest per-Gaussian footprint bounds the count before allocating.
    let n = r.len(4 * PARAM_COUNT)?;
    let step = r.u64()?;

    let pos = r.vec(2 * n, |r| r.f32::<T>())?;
    let rot = r.vec(n, |r| r.f32::<T>())?;
    let ls = r.vec(2 * n, |r| r.f32::<T>())?;
    let op = r.vec(n, |r| r.f32::<T>())?;
    let col = r.vec(3 * n, |r| r.f32::<T>())?;
    let depth = r.vec(n, |r| r.f32::<T>())?;
    let gaussians: Vec<Gaussian2D<T>> = (0..n)
        .map(|i| Gaussian2D {
            position: [pos[2 * i], pos[2 * i + 1]],
            rotation: rot[i],
            log_scales: [ls[2 * i], ls[2 * i + 1]],
            raw_opacity: op[i],
            raw_color: [col[3 * i], col[3 * i + 1], col[3 * i + 2]],
            depth_key: depth[i],
        })
        .collect();

    let mut row = |r: &mut Reader| -> Result<[T; PARAM_COUNT]> {
        let mut out = [T::zero(); PARAM_COUNT];
        for v in &mut out {
            *v = r.f32()?;
        }
        Ok(out)
    };
    let first = r.vec(n, &mut row)?;
    let second = r.vec(n, &mut row)?;
    let lr = LearningRates {
        position: r.f32()?,
        rotation: r.f32()?,
        log_scales: r.f32()?,
        raw_opacity: r.f32()?,
        color: r.f32()?,
    };
    let optimizer = OptimizerState::from_parts(lr, first, second, step)?;

    let ids = r.vec(n, |r| r.u64())?;
    let thresholds = r.vec(n, |r| r.u32())?;
    let stats = DensifyStats {
        pos_grad_norm_accum: r.vec(n, |r| r.f32::<T>())?,
        color_grad_norm_accum: r.vec(n, |r| r.f32::<T>())?,
        accum_count: r.vec(n, |r| r.u32())?,
        visit_count: r.vec(n, |r| r.u32())?,
        window_visits: r.vec(n, |r| r.u32())?,
    };
    let next_id = r.u64()?;
    let model = GaussianModel::from_parts(gaussians, ids, thresholds, stats, next_id).map_err(|e| corrupt(e.to_string()))?;

    let cfg = BudgetConfig {
        n_init: r.u64()? as usize,
        m_final: r.u64()? as usize,
        warmup_steps: r.u64()?,
        refit_interval: r.u64()?,
        window_size: r.u64()? as usize,
        history_depth: r.u64()? as usize,
        lambda: r.f64()?,
        adaptive: r.flag()?,
    };
    let mut controller = BudgetController::new(cfg).map_err(|e| corrupt(e.to_string()))?;
    controller.m_adaptive = r.f64()?;
    controller.alpha = r.f64()?;
    controller.alpha_base = r.f64()?;
    let nf = r.len(8)?;
    controller.fitted = r.vec(nf, |r| r.f64())?.into_iter().collect::<VecDeque<_>>();
    let has_ema = r.flag()?;
    let ema = r.f64()?;
    controller.ema = has_ema.then_some(ema);
    let nl = r.len(16)?;
    controller.loss_log = r.vec(nl, |r| Ok((r.f64()?, r.f64()?)))?;
    let has_refit = r.flag()?;
    let last = r.u64()?;
    controller.last_refit = has_refit.then_some(last);

    let iteration = r.u64()?;
    let dilation_counter = r.u64()?;
    let view_counter = r.u64()?;
    let width = r.u64()? as usize;
    let height = r.u64()? as usize;

    let mut rng = ChaCha8Rng::from_seed(r.array()?);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(u128::from_le_bytes(r.array()?));

    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(TrainState {
        model,
        optimizer,
        controller,
        rng,
        iteration,
        dilation_counter,
        view_counter,
        width,
        height,
    })
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, state: &TrainState<T>) -> Result<()> {
    std::fs::write(path, encode(state))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<TrainState<T>> {
    decode(&std::fs::read(path)?)
}
