//! Activation maximization: projected gradient ascent on an input image to
//! raise one class logit of a frozen classifier.
//!
//! Images are `[C, H, W]` (or `[1, C, H, W]`) tensors with values in `[0, 1]`.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::mask_class;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::pnm::{encode_ppm, quantize};
use crate::seed::{derive_seed, rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// 0.5 plus Normal(0, 0.01) per channel value.
    GrayPlusNoise,
    /// Uniform on [0.4, 0.6].
    UniformRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    pub enabled: bool,
    pub max_shift: usize,
    /// Shift on iterations that are multiples of this.
    pub period: usize,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            enabled: true,
            max_shift: 2,
            period: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizConfig {
    pub target_class: usize,
    pub iterations: usize,
    pub step: f32,
    pub l2_lambda: f32,
    pub tv_lambda: f32,
    pub jitter: Jitter,
    /// Standard deviation of the Gaussian noise added to the image every
    /// iteration; 0 disables it.
    pub input_noise_sigma: f32,
    pub init: InitMode,
    pub seed: u64,
}

impl Default for VizConfig {
    fn default() -> Self {
        VizConfig {
            target_class: 0,
            iterations: 256,
            step: 0.05,
            l2_lambda: 1e-4,
            tv_lambda: 2.5e-4,
            jitter: Jitter::default(),
            input_noise_sigma: 0.01,
            init: InitMode::GrayPlusNoise,
            seed: 0,
        }
    }
}

impl VizConfig {
    /// Plain ascent on the logit: no penalties, jitter or added noise.
    pub fn unregularized() -> Self {
        VizConfig {
            l2_lambda: 0.0,
            tv_lambda: 0.0,
            jitter: Jitter {
                enabled: false,
                ..Jitter::default()
            },
            input_noise_sigma: 0.0,
            ..VizConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::Config(format!("step must be positive, got {}", self.step)));
        }
        for (name, v) in [
            ("l2_lambda", self.l2_lambda),
            ("tv_lambda", self.tv_lambda),
            ("input_noise_sigma", self.input_noise_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if self.jitter.enabled && self.jitter.period == 0 {
            return Err(Error::Config("jitter period must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub raw_logit: f32,
    pub objective: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedShift {
    pub iteration: usize,
    pub dx: i64,
    pub dy: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VizResult {
    /// Final image, `[C, H, W]`, every value in `[0, 1]`.
    pub image: Tensor,
    /// Raw logit and objective at the start of each iteration.
    pub trace: Vec<TraceRow>,
    pub shifts: Vec<AppliedShift>,
    pub config: VizConfig,
    pub checkpoint_id: Option<String>,
}

impl VizResult {
    pub fn to_ppm(&self) -> Result<Vec<u8>> {
        image_to_ppm(&self.image)
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,raw_logit,objective\n");
        for r in &self.trace {
            writeln!(out, "{},{},{}", r.iteration, r.raw_logit, r.objective).expect("write to string");
        }
        out
    }
}

fn plane_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape("image", "rank", format!("expected at least 2 dims, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((x.numel() / (h * w), h, w))
}

/// 8-bit binary PPM of a 3-channel `[C, H, W]` image, round-half-up.
pub fn image_to_ppm(x: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = plane_dims(x)?;
    if c != 3 {
        return Err(Error::shape("image_to_ppm", "channels", format!("expected 3, got {c}")));
    }
    let d = x.data();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for ch in 0..3 {
            rgb.push(quantize(d[ch * h * w + p]));
        }
    }
    Ok(encode_ppm(w, h, &rgb))
}

/// Cyclic translation: the value at `(y, x)` moves to
/// `((y + dy) mod H, (x + dx) mod W)` in every channel.
pub fn jitter_shift(x: &Tensor, dx: i64, dy: i64) -> Tensor {
    let (c, h, w) = plane_dims(x).expect("image tensor");
    let sx = dx.rem_euclid(w as i64) as usize;
    let sy = dy.rem_euclid(h as i64) as usize;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            let ty = (y + sy) % h;
            for xx in 0..w {
                out[base + ty * w + (xx + sx) % w] = src[base + y * w + xx];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Anisotropic total variation over all channels (no wrap-around).
pub fn tv_penalty(x: &Tensor) -> f64 {
    let (c, h, w) = plane_dims(x).expect("image tensor");
    let d = x.data();
    let mut total = 0.0f64;
    for ch in 0..c {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let v = p[y * w + xx] as f64;
                if xx + 1 < w {
                    total += (p[y * w + xx + 1] as f64 - v).abs();
                }
                if y + 1 < h {
                    total += (p[(y + 1) * w + xx] as f64 - v).abs();
                }
            }
        }
    }
    total
}

/// Subgradient of [`tv_penalty`], taking sign(0) = 0.
pub fn tv_gradient(x: &Tensor) -> Tensor {
    let (c, h, w) = plane_dims(x).expect("image tensor");
    let d = x.data();
    let mut g = vec![0.0f32; d.len()];
    let sign = |v: f32| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                let i = base + y * w + xx;
                if xx + 1 < w {
                    let s = sign(d[i + 1] - d[i]);
                    g[i + 1] += s;
                    g[i] -= s;
                }
                if y + 1 < h {
                    let s = sign(d[i + w] - d[i]);
                    g[i + w] += s;
                    g[i] -= s;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), g).expect("same shape")
}

pub fn l2_penalty(x: &Tensor) -> f64 {
    x.data().iter().map(|&v| (v as f64) * (v as f64)).sum()
}

/// Value of the ascent objective together with its gradient.
#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub raw_logit: f32,
    pub objective: f64,
    pub gradient: Tensor,
}

fn check_input<C: Classifier + ?Sized>(model: &C, x: &Tensor, target: usize) -> Result<()> {
    if target >= model.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "target class {target} out of range for {} classes",
            model.num_classes()
        )));
    }
    let (c, h, w) = model.input_dims();
    if plane_dims(x)? != (c, h, w) || x.numel() != c * h * w {
        return Err(Error::shape(
            "objective",
            "image",
            format!("classifier expects [{c}, {h}, {w}], got {:?}", x.shape()),
        ));
    }
    Ok(())
}

/// `logit_c(x) − l2·Σx² − tv·TV(x)` and its gradient in `x`.
pub fn objective_with_gradient<C: Classifier + ?Sized>(model: &C, x: &Tensor, cfg: &VizConfig) -> Result<ObjectiveEval> {
    check_input(model, x, cfg.target_class)?;
    let (c, h, w) = model.input_dims();
    let mut g = Graph::new();
    let input = g.leaf(x.clone().reshape([1, c, h, w])?, true);
    let logits = model.logits_node(&mut g, input)?;
    let k = model.num_classes();
    let raw_logit = g.value(logits).data()[cfg.target_class];
    let mut seed = vec![0.0; k];
    seed[cfg.target_class] = 1.0;
    g.backward_with_seed(logits, &seed)?;
    let mut gradient = g.grad(input).map_or_else(|| vec![0.0; c * h * w], |s| s.to_vec());

    let mut objective = raw_logit as f64;
    if cfg.l2_lambda > 0.0 {
        objective -= cfg.l2_lambda as f64 * l2_penalty(x);
        for (gv, &xv) in gradient.iter_mut().zip(x.data()) {
            *gv -= 2.0 * cfg.l2_lambda * xv;
        }
    }
    if cfg.tv_lambda > 0.0 {
        objective -= cfg.tv_lambda as f64 * tv_penalty(x);
        for (gv, tv) in gradient.iter_mut().zip(tv_gradient(x).data()) {
            *gv -= cfg.tv_lambda * tv;
        }
    }
    Ok(ObjectiveEval {
        raw_logit,
        objective,
        gradient: Tensor::new(x.shape().to_vec(), gradient)?,
    })
}

pub fn objective<C: Classifier + ?Sized>(model: &C, x: &Tensor, cfg: &VizConfig) -> Result<f64> {
    Ok(objective_with_gradient(model, x, cfg)?.objective)
}

/// Initial image for a configuration.
pub fn initial_image(dims: (usize, usize, usize), init: InitMode, seed: u64) -> Tensor {
    let (c, h, w) = dims;
    let mut r = rng(derive_seed(seed, "viz-init", 0));
    let data = match init {
        InitMode::GrayPlusNoise => {
            let normal = Normal::new(0.5f32, 0.01).expect("finite std");
            (0..c * h * w).map(|_| normal.sample(&mut r).clamp(0.0, 1.0)).collect()
        }
        InitMode::UniformRandom => (0..c * h * w).map(|_| r.random_range(0.4f32..0.6)).collect(),
    };
    Tensor::new([c, h, w], data).expect("positive dims")
}

/// Runs projected gradient ascent from the configured initialization.
pub fn visualize<C: Classifier + ?Sized>(model: &C, cfg: &VizConfig) -> Result<VizResult> {
    let x = initial_image(model.input_dims(), cfg.init, cfg.seed);
    visualize_from(model, cfg, x)
}

/// Ascent from a given `[C, H, W]` starting image.
///
/// Each iteration: optionally shift the image (every `period` iterations),
/// optionally add Gaussian noise, take one step along the objective
/// gradient, clip to `[0, 1]`, and undo the shift.
pub fn visualize_from<C: Classifier + ?Sized>(model: &C, cfg: &VizConfig, start: Tensor) -> Result<VizResult> {
    cfg.validate()?;
    check_input(model, &start, cfg.target_class)?;
    let mut x = start;
    let mut r = rng(derive_seed(cfg.seed, "viz-loop", 0));
    let noise = Normal::new(0.0f32, cfg.input_noise_sigma).expect("validated sigma");
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut shifts = Vec::new();
    for iteration in 0..cfg.iterations {
        let mut shift = None;
        if cfg.jitter.enabled && iteration % cfg.jitter.period == 0 && cfg.jitter.max_shift > 0 {
            let m = cfg.jitter.max_shift as i64;
            let (dx, dy) = (r.random_range(-m..=m), r.random_range(-m..=m));
            x = jitter_shift(&x, dx, dy);
            shifts.push(AppliedShift { iteration, dx, dy });
            shift = Some((dx, dy));
        }
        if cfg.input_noise_sigma > 0.0 {
            for v in x.data_mut() {
                *v += noise.sample(&mut r);
            }
        }
        let eval = objective_with_gradient(model, &x, cfg)?;
        if !eval.gradient.all_finite() {
            return Err(Error::NonFiniteGradient { iteration });
        }
        trace.push(TraceRow {
            iteration,
            raw_logit: eval.raw_logit,
            objective: eval.objective,
        });
        for (v, g) in x.data_mut().iter_mut().zip(eval.gradient.data()) {
            *v = (*v + cfg.step * g).clamp(0.0, 1.0);
        }
        if let Some((dx, dy)) = shift {
            x = jitter_shift(&x, -dx, -dy);
        }
    }
    Ok(VizResult {
        image: x,
        trace,
        shifts,
        config: cfg.clone(),
        checkpoint_id: None,
    })
}

/// Pixels covered by at least half of a class's masks.
pub fn class_footprint(masks: &[&[u8]], class: usize) -> Result<Vec<bool>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("class {class} has no reference masks")))?;
    let n = first.len();
    if masks.iter().any(|m| m.len() != n) {
        return Err(Error::InvalidArgument("reference masks differ in size".into()));
    }
    let mut counts = vec![0usize; n];
    for m in masks {
        for (c, &v) in counts.iter_mut().zip(m.iter()) {
            *c += (mask_class(v) == Some(class)) as usize;
        }
    }
    Ok(counts.into_iter().map(|c| 2 * c >= masks.len()).collect())
}

/// Fraction of the image's gradient-magnitude energy inside `footprint`.
///
/// Energy at a pixel is the squared forward difference to its right and
/// lower neighbours (cyclically), summed over channels. An image with no
/// energy scores 0.
pub fn foreground_energy(image: &Tensor, footprint: &[bool]) -> Result<f64> {
    let (c, h, w) = plane_dims(image)?;
    if footprint.len() != h * w {
        return Err(Error::shape(
            "foreground_energy",
            "footprint",
            format!("{} entries for a {h}x{w} image", footprint.len()),
        ));
    }
    let d = image.data();
    let (mut inside, mut total) = (0.0f64, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let mut e = 0.0f64;
            for ch in 0..c {
                let p = &d[ch * h * w..(ch + 1) * h * w];
                let v = p[y * w + x] as f64;
                let gx = p[y * w + (x + 1) % w] as f64 - v;
                let gy = p[((y + 1) % h) * w + x] as f64 - v;
                e += gx * gx + gy * gy;
            }
            total += e;
            if footprint[y * w + x] {
                inside += e;
            }
        }
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}
