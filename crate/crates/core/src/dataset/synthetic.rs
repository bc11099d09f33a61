//! Procedural shapes on cluttered backgrounds, with exact masks.
//!
//! Each class is one shape family drawn in a class-specific hue. The
//! background is a clutter of rectangles and discs around one base hue; in
//! correlated mode that hue is tied to the class with probability `rho`,
//! which plants a background shortcut a classifier can learn.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mask_value, ClassTable, Dataset, LabeledImage, BACKGROUND};
use crate::error::{Error, Result};
use crate::pnm::{dequantize, quantize};
use crate::seed::{derive_seed, rng};

pub const SHAPE_FAMILIES: [&str; 8] = ["circle", "square", "triangle", "cross", "ring", "bar", "star", "diamond"];

const MIN_FOREGROUND: f64 = 0.05;
const MAX_FOREGROUND: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundMode {
    Uncorrelated,
    Correlated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub resolution: usize,
    pub background_mode: BackgroundMode,
    /// Probability that the background hue is the class hue; ignored when uncorrelated.
    pub correlation: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 8,
            per_class: 50,
            resolution: 64,
            background_mode: BackgroundMode::Uncorrelated,
            correlation: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > SHAPE_FAMILIES.len() {
            return Err(Error::Config(format!(
                "synthetic data supports 2..={} classes, got {}",
                SHAPE_FAMILIES.len(),
                self.classes
            )));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be positive".into()));
        }
        if self.resolution < 32 {
            return Err(Error::Config(format!("resolution must be >= 32, got {}", self.resolution)));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::Config(format!("correlation {} outside [0,1]", self.correlation)));
        }
        Ok(())
    }

    pub fn class_table(&self) -> ClassTable {
        ClassTable::new(SHAPE_FAMILIES[..self.classes].iter().map(|s| s.to_string()).collect())
            .expect("shape family names are unique")
    }
}

/// Foreground hue of a class, in degrees.
pub fn class_hue(class: usize, classes: usize) -> f64 {
    360.0 * class as f64 / classes as f64
}

/// Background hue tied to a class in correlated mode: halfway between
/// neighbouring foreground hues.
pub fn class_background_hue(class: usize, classes: usize) -> f64 {
    360.0 * (class as f64 + 0.5) / classes as f64
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let total = cfg.classes * cfg.per_class;
    let images = (0..total)
        .into_par_iter()
        .map(|i| render_image(cfg, i / cfg.per_class, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        classes: cfg.class_table(),
        images,
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Whether the point `(u, v)` in the shape's unit frame is inside the shape.
fn inside(family: usize, u: f64, v: f64) -> bool {
    match family {
        // circle
        0 => u * u + v * v <= 1.0,
        // square
        1 => u.abs().max(v.abs()) <= 0.7,
        // triangle with vertices (0,-1), (±0.866, 0.5)
        2 => {
            let s3 = 3f64.sqrt();
            v <= 0.5 && v >= s3 * u - 1.0 && v >= -s3 * u - 1.0
        }
        // cross
        3 => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        // ring
        4 => {
            let r2 = u * u + v * v;
            (0.3025..=1.0).contains(&r2)
        }
        // bar
        5 => u.abs() <= 0.94 && v.abs() <= 0.34,
        // star: radius oscillates between 0.45 and 1 with five tips
        6 => {
            let r = (u * u + v * v).sqrt();
            let period = std::f64::consts::TAU / 5.0;
            let phase = (v.atan2(u) + std::f64::consts::FRAC_PI_2).rem_euclid(period) / period;
            let tip = 1.0 - 2.0 * (phase - 0.5).abs();
            r <= 0.45 + 0.55 * (1.0 - tip)
        }
        // diamond
        _ => u.abs() + v.abs() <= 1.0,
    }
}

fn render_image(cfg: &SyntheticConfig, class: usize, index: usize) -> Result<LabeledImage> {
    let res = cfg.resolution;
    let mut rng = rng(derive_seed(cfg.seed, "synthetic-image", index as u64));

    let base_hue = match cfg.background_mode {
        BackgroundMode::Correlated if rng.random_bool(cfg.correlation) => class_background_hue(class, cfg.classes),
        _ => rng.random_range(0.0..360.0),
    };

    let mut pixels = vec![0.0f64; res * res * 3];
    paint_clutter(&mut pixels, res, base_hue, &mut rng);

    let rotates = !matches!(class, 0 | 4);
    let mut mask = vec![BACKGROUND; res * res];
    let mut placed = false;
    for _attempt in 0..64 {
        let scale = rng.random_range(0.2..0.34) * res as f64;
        let cx = rng.random_range(scale..res as f64 - scale);
        let cy = rng.random_range(scale..res as f64 - scale);
        let theta = if rotates { rng.random_range(0.0..std::f64::consts::TAU) } else { 0.0 };
        let (sin, cos) = theta.sin_cos();
        let mut count = 0;
        for y in 0..res {
            for x in 0..res {
                let dx = (x as f64 + 0.5 - cx) / scale;
                let dy = (y as f64 + 0.5 - cy) / scale;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                let hit = inside(class, u, v);
                mask[y * res + x] = if hit { mask_value(class) } else { BACKGROUND };
                count += hit as usize;
            }
        }
        let frac = count as f64 / (res * res) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            placed = true;
            break;
        }
    }
    if !placed {
        return Err(Error::Dataset(format!("could not place a {} shape", SHAPE_FAMILIES[class])));
    }
    paint_foreground(&mut pixels, &mask, res, class, cfg.classes, &mut rng);

    let pixels = pixels.into_iter().map(|v| dequantize(quantize(v as f32))).collect();
    LabeledImage::new(format!("img_{index:05}"), res, res, pixels, mask, class)
}

fn paint_clutter(pixels: &mut [f64], res: usize, base_hue: f64, rng: &mut impl Rng) {
    let fill = hsv_to_rgb(base_hue, rng.random_range(0.3..0.5), rng.random_range(0.35..0.55));
    for px in pixels.chunks_exact_mut(3) {
        px.copy_from_slice(&fill);
    }
    let pieces = rng.random_range(10..18);
    for _ in 0..pieces {
        let hue = base_hue + rng.random_range(-15.0..15.0);
        let color = hsv_to_rgb(hue, rng.random_range(0.25..0.6), rng.random_range(0.3..0.75));
        let cx = rng.random_range(0.0..res as f64);
        let cy = rng.random_range(0.0..res as f64);
        let rx = rng.random_range(0.04..0.2) * res as f64;
        let ry = rng.random_range(0.04..0.2) * res as f64;
        let disc = rng.random_bool(0.5);
        for y in 0..res {
            for x in 0..res {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let hit = if disc { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if hit {
                    pixels[(y * res + x) * 3..(y * res + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }
    for v in pixels.iter_mut() {
        *v = (*v + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
    }
}

fn paint_foreground(pixels: &mut [f64], mask: &[u8], res: usize, class: usize, classes: usize, rng: &mut impl Rng) {
    let hue = class_hue(class, classes) + rng.random_range(-6.0..6.0);
    let sat = rng.random_range(0.75..0.95);
    let val = rng.random_range(0.8..0.95);
    // per-image stripe texture
    let freq = rng.random_range(0.15..0.45);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.05..0.15);
    let (sin, cos) = angle.sin_cos();
    for y in 0..res {
        for x in 0..res {
            if mask[y * res + x] == BACKGROUND {
                continue;
            }
            let t = (freq * (cos * x as f64 + sin * y as f64) + phase).sin();
            let rgb = hsv_to_rgb(hue, sat, (val * (1.0 - amp + amp * t)).clamp(0.0, 1.0));
            pixels[(y * res + x) * 3..(y * res + x) * 3 + 3].copy_from_slice(&rgb);
        }
    }
}
