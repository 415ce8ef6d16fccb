use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use turbo_splat::bench::bench;
use turbo_splat::checkpoint::{load_checkpoint, save_checkpoint};
use turbo_splat::image::Image;
use turbo_splat::init::read_seed_file;
use turbo_splat::loss::{psnr, ssim};
use turbo_splat::raster::{RasterConfig, Rasterizer};
use turbo_splat::train::{TrainConfig, Trainer};
use turbo_splat::Scalar;

const THREADS_ENV: &str = "TURBO_SPLAT_THREADS";

#[derive(Parser)]
#[command(name = "turbo-splat", version, about = "Fit an image with 2D Gaussian splats")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a PNG and write render.png, model.ckpt and metrics.csv.
    Fit(FitArgs),
    /// Render a checkpoint at full resolution.
    Render(RenderArgs),
    /// PSNR and SSIM between two images.
    Eval(EvalArgs),
    /// Blend-op counts and forward+backward timing at p = 1, 2, 4.
    Bench(BenchArgs),
}

#[derive(Args)]
struct Common {
    /// Worker threads, 0 for all cores. TURBO_SPLAT_THREADS takes precedence.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Compute in 64-bit floats.
    #[arg(long)]
    fp64: bool,
}

impl Common {
    fn threads(&self) -> Result<usize> {
        match std::env::var(THREADS_ENV) {
            Ok(v) => v.trim().parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count")),
            Err(_) => Ok(self.threads),
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    iters: u64,
    /// Defaults scale with --iters.
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long, default_value_t = 20)]
    densify_interval: u64,
    /// Defaults scale with --iters.
    #[arg(long)]
    densify_until: Option<u64>,
    #[arg(long, default_value_t = 50_000)]
    max_gaussians: usize,
    #[arg(long, default_value_t = 500)]
    init_points: usize,
    #[arg(long, default_value_t = 1)]
    upsample_rounds: usize,
    #[arg(long, default_value_t = 2)]
    dilation: usize,
    #[arg(long, default_value_t = 0.5)]
    post_dilation_prob: f64,
    #[arg(long, default_value_t = 0.2)]
    ssim_weight: f64,
    #[arg(long)]
    batch_final: Option<u64>,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    tau_position: f64,
    #[arg(long, default_value_t = 0.2)]
    color_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    log_every: u64,
    /// Seed points ("x y r g b" per line) instead of sampling the image.
    #[arg(long)]
    seeds: Option<PathBuf>,
    /// Fill the CSV `ms` column with wall-clock time (otherwise 0).
    #[arg(long)]
    timing: bool,
    /// Densify without the visit gate.
    #[arg(long)]
    no_visit_gate: bool,
    /// Keep the budget exponent and ceiling fixed.
    #[arg(long)]
    fixed_budget: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    a: PathBuf,
    b: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[command(flatten)]
    common: Common,
}

impl FitArgs {
    fn config(&self) -> Result<TrainConfig> {
        let base = TrainConfig::scaled_to(self.iters);
        let cfg = TrainConfig {
            total_iters: self.iters,
            warmup_iters: self.warmup.unwrap_or(base.warmup_iters),
            densify_interval: self.densify_interval,
            densify_until: self.densify_until.unwrap_or(base.densify_until),
            batch_final_iters: self.batch_final.unwrap_or(base.batch_final_iters),
            batch_size: self.batch_size,
            dilation_p: self.dilation,
            post_densify_dilation_prob: self.post_dilation_prob,
            ssim_weight: self.ssim_weight,
            seed: self.seed,
            threads: self.common.threads()?,
            log_every: self.log_every,
            max_gaussians: self.max_gaussians,
            init_points: self.init_points,
            upsample_rounds: self.upsample_rounds,
            tau_position: self.tau_position,
            color_prob: self.color_prob,
            visit_gate: !self.no_visit_gate,
            adaptive_budget: !self.fixed_budget,
            record_timing: self.timing,
            ..base
        };
        cfg.validate().context("config")?;
        Ok(cfg)
    }
}

fn fit<T: Scalar>(args: &FitArgs) -> Result<()> {
    let cfg = args.config()?;
    let target: Image<T> =
        Image::load_png(&args.input).with_context(|| format!("image: reading {}", args.input.display()))?;
    let seeds = match &args.seeds {
        Some(p) => Some(read_seed_file(p).with_context(|| format!("initializer: reading {}", p.display()))?),
        None => None,
    };
    let (w, h) = (target.width(), target.height());
    let mut trainer = Trainer::new(cfg, vec![target], seeds).context("trainer: setup")?;
    trainer.run().context("trainer")?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let render = trainer.rasterizer().render_image(trainer.model(), w, h, 1).context("rasterizer")?;
    render.save_png(args.out.join("render.png")).context("writing render.png")?;
    save_checkpoint(args.out.join("model.ckpt"), trainer.state()).context("checkpoint")?;
    let csv = fs::File::create(args.out.join("metrics.csv")).context("creating metrics.csv")?;
    trainer.report().write_csv(BufWriter::new(csv)).context("writing metrics.csv")?;

    let r = trainer.report();
    println!(
        "{} gaussians (from {}), psnr {:.3} dB, ssim {:.4}",
        trainer.model().len(),
        r.initial_count,
        r.final_psnr,
        r.final_ssim
    );
    Ok(())
}

fn rasterizer<T: Scalar>(common: &Common) -> Result<Rasterizer<T>> {
    Rasterizer::new(RasterConfig::default(), common.threads()?).context("rasterizer")
}

fn load<T: Scalar>(path: &Path) -> Result<turbo_splat::train::TrainState<T>> {
    load_checkpoint(path).with_context(|| format!("checkpoint: reading {}", path.display()))
}

fn render<T: Scalar>(args: &RenderArgs) -> Result<()> {
    let state = load::<T>(&args.ckpt)?;
    let img = rasterizer::<T>(&args.common)?
        .render_image(&state.model, state.width, state.height, 1)
        .context("rasterizer")?;
    img.save_png(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let a: Image<f64> = Image::load_png(&args.a).with_context(|| format!("image: reading {}", args.a.display()))?;
    let b: Image<f64> = Image::load_png(&args.b).with_context(|| format!("image: reading {}", args.b.display()))?;
    if !a.same_size(&b) {
        bail!("eval: images are {}x{} and {}x{}", a.width(), a.height(), b.width(), b.height());
    }
    println!("psnr {:.4}", psnr(&a, &b)?);
    println!("ssim {:.6}", ssim(&a, &b)?);
    Ok(())
}

fn run_bench<T: Scalar>(args: &BenchArgs) -> Result<()> {
    let state = load::<T>(&args.ckpt)?;
    let raster = rasterizer::<T>(&args.common)?;
    let report = bench(&raster, &state.model, state.width, state.height, &[1, 2, 4], args.repeats).context("bench")?;
    print!("{}", report.to_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) if a.common.fp64 => fit::<f64>(a),
        Command::Fit(a) => fit::<f32>(a),
        Command::Render(a) if a.common.fp64 => render::<f64>(a),
        Command::Render(a) => render::<f32>(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) if a.common.fp64 => run_bench::<f64>(a),
        Command::Bench(a) => run_bench::<f32>(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
