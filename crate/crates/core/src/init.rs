//! Seed points and the initial model.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::kdtree::KdTree;
use crate::model::GaussianModel;
use crate::scalar::Scalar;
use crate::splat::{logit, Gaussian2D};

/// Initial activated opacity of every Gaussian.
pub const INITIAL_OPACITY: f64 = 0.1;
const COLOR_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedPoint {
    pub position: [f64; 2],
    pub color: [f64; 3],
}

/// Half the points uniformly over the image, half drawn in proportion to the
/// luminance gradient magnitude (jittered within the chosen pixel).
pub fn sample_seed_points<T: Scalar, R: Rng + ?Sized>(image: &Image<T>, count: usize, rng: &mut R) -> Result<Vec<SeedPoint>> {
    let (w, h) = (image.width(), image.height());
    if count == 0 {
        return Err(invalid("seed point count must be >= 1"));
    }
    if count > w * h {
        return Err(invalid(format!("{count} seed points requested for a {w}x{h} image")));
    }
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    let n_importance = count / 2;
    let mut points = Vec::with_capacity(count);
    for _ in 0..count - n_importance {
        let position = [rng.gen::<f64>() * xmax, rng.gen::<f64>() * ymax];
        points.push(SeedPoint { position, color: color_at(image, position) });
    }

    let cdf = gradient_cdf(image);
    let total = *cdf.last().unwrap();
    for _ in 0..n_importance {
        let position = if total > 0.0 {
            let u = rng.gen::<f64>() * total;
            let pixel = cdf.partition_point(|&c| c <= u).min(w * h - 1);
            let (px, py) = ((pixel % w) as f64, (pixel / w) as f64);
            [
                (px + rng.gen::<f64>() - 0.5).clamp(0.0, xmax),
                (py + rng.gen::<f64>() - 0.5).clamp(0.0, ymax),
            ]
        } else {
            [rng.gen::<f64>() * xmax, rng.gen::<f64>() * ymax]
        };
        points.push(SeedPoint { position, color: color_at(image, position) });
    }
    Ok(points)
}

fn color_at<T: Scalar>(image: &Image<T>, p: [f64; 2]) -> [f64; 3] {
    let x = (p[0].round() as usize).min(image.width() - 1);
    let y = (p[1].round() as usize).min(image.height() - 1);
    image.get(x, y).map(|c| c.as_f64())
}

/// Running sum of the per-pixel central-difference luminance gradient magnitude.
fn gradient_cdf<T: Scalar>(image: &Image<T>) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let luma = |x: usize, y: usize| {
        let [r, g, b] = image.get(x, y).map(|c| c.as_f64());
        0.299 * r + 0.587 * g + 0.114 * b
    };
    let mut cdf = Vec::with_capacity(w * h);
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            let gx = (luma((x + 1).min(w - 1), y) - luma(x.saturating_sub(1), y)) / 2.0;
            let gy = (luma(x, (y + 1).min(h - 1)) - luma(x, y.saturating_sub(1))) / 2.0;
            acc += gx.hypot(gy);
            cdf.push(acc);
        }
    }
    cdf
}

/// Parses one `x y r g b` line per point. Blank lines and `#` comments are skipped.
pub fn parse_seed_points(text: &str) -> Result<Vec<SeedPoint>> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| invalid(format!("seed line {}: {e}", lineno + 1)))?;
        let [x, y, r, g, b] = values[..] else {
            return Err(invalid(format!("seed line {}: expected 5 values, got {}", lineno + 1, values.len())));
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("seed line {}: non-finite value", lineno + 1)));
        }
        points.push(SeedPoint { position: [x, y], color: [r, g, b] });
    }
    Ok(points)
}

pub fn read_seed_file(path: impl AsRef<Path>) -> Result<Vec<SeedPoint>> {
    parse_seed_points(&std::fs::read_to_string(path)?)
}

/// Inserts the midpoint of every unique nearest-neighbor pair, `rounds` times.
pub fn kdtree_upsample(points: &[SeedPoint], rounds: usize) -> Vec<SeedPoint> {
    let mut current = points.to_vec();
    for _ in 0..rounds {
        if current.len() < 2 {
            break;
        }
        let positions: Vec<[f64; 2]> = current.iter().map(|p| p.position).collect();
        let tree = KdTree::build(&positions);
        let pairs: BTreeSet<(usize, usize)> = (0..current.len())
            .filter_map(|i| tree.nearest(positions[i], Some(i)).map(|j| (i.min(j), i.max(j))))
            .collect();
        let key = |p: [f64; 2]| (p[0].to_bits(), p[1].to_bits());
        let mut seen: HashSet<(u64, u64)> = positions.iter().map(|&p| key(p)).collect();
        for (a, b) in pairs {
            let (pa, pb) = (current[a], current[b]);
            let position = [0.5 * (pa.position[0] + pb.position[0]), 0.5 * (pa.position[1] + pb.position[1])];
            if !seen.insert(key(position)) {
                continue;
            }
            let color = std::array::from_fn(|c| 0.5 * (pa.color[c] + pb.color[c]));
            current.push(SeedPoint { position, color });
        }
    }
    current
}

/// One isotropic Gaussian per seed point, sized by the mean distance to its
/// three nearest neighbors (a sixteenth of the image diagonal for fewer than
/// four points).
pub fn init_model<T: Scalar, R: Rng + ?Sized>(
    points: &[SeedPoint],
    image: &Image<T>,
    visit_threshold: u32,
    rng: &mut R,
) -> Result<GaussianModel<T>> {
    if points.is_empty() {
        return Err(invalid("cannot initialize a model from zero seed points"));
    }
    let diagonal = image.diagonal();
    let positions: Vec<[f64; 2]> = points.iter().map(|p| p.position).collect();
    let tree = KdTree::build(&positions);
    let raw_opacity = logit(T::lit(INITIAL_OPACITY));
    let gaussians = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let scale = if points.len() >= 4 {
                let nn = tree.k_nearest(p.position, 3, Some(i));
                nn.iter().map(|&(_, d2)| d2.sqrt()).sum::<f64>() / 3.0
            } else {
                diagonal.as_f64() / 16.0
            };
            let ln_scale = T::lit(scale.ln());
            let mut g = Gaussian2D {
                position: p.position.map(T::lit),
                rotation: T::zero(),
                log_scales: [ln_scale, ln_scale],
                raw_opacity,
                raw_color: p.color.map(|c| logit(T::lit(c.clamp(COLOR_MARGIN, 1.0 - COLOR_MARGIN)))),
                depth_key: T::lit(rng.gen::<f64>()),
            };
            g.clamp(diagonal);
            g
        })
        .collect();
    Ok(GaussianModel::from_gaussians(gaussians, visit_threshold))
}
