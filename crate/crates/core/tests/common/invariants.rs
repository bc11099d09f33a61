//! Measurements of the variant constructions over a synthetic dataset.

#![allow(dead_code)]

use fvlab::dataset::{is_foreground, Dataset};
use fvlab::transforms::{build_variant, NoiseParams, VariantKind};

#[derive(Debug)]
pub struct TransformReport {
    pub images: usize,
    /// Foreground values differing in any bit from the source, over all variants.
    pub foreground_mismatches: usize,
    pub black_background_sum: f64,
    pub noise_samples: usize,
    pub noise_mean: f64,
    /// 3σ/√n for the pre-clip mean.
    pub noise_mean_bound: f64,
    pub clipped_fraction: f64,
    /// Stored noise values that are not the clipped pre-clip draw.
    pub noise_mismatches: usize,
    pub mixed_removed: usize,
    /// Mixed images that are neither untouched nor exactly background-removed.
    pub mixed_mismatches: usize,
}

pub fn measure(source: &Dataset, noise: &NoiseParams, seed: u64) -> TransformReport {
    let variant = |kind| build_variant(source, kind, noise, seed).unwrap();
    let black = variant(VariantKind::BlackBackground);
    let noisy = variant(VariantKind::NoiseBackground);
    let mixed = variant(VariantKind::Mixed);
    let standard = variant(VariantKind::Standard);

    let mut foreground_mismatches = 0;
    let mut black_background_sum = 0.0f64;
    let (mut count, mut sum, mut clipped, mut noise_mismatches) = (0usize, 0.0f64, 0usize, 0usize);
    for (i, src) in source.images.iter().enumerate() {
        for v in [&standard, &black, &noisy, &mixed] {
            let out = &v.data.images[i];
            for (p, &m) in src.mask.iter().enumerate() {
                if is_foreground(m) {
                    for c in 0..3 {
                        if out.pixels[3 * p + c].to_bits() != src.pixels[3 * p + c].to_bits() {
                            foreground_mismatches += 1;
                        }
                    }
                }
            }
        }
        let (b, n) = (&black.data.images[i], &noisy.data.images[i]);
        for (p, &m) in src.mask.iter().enumerate() {
            if is_foreground(m) {
                continue;
            }
            let (x, y) = (p % src.width, p / src.width);
            for c in 0..3 {
                black_background_sum += b.pixels[3 * p + c] as f64;
                let draw = noise.draw(&src.id, x, y, c);
                count += 1;
                sum += draw;
                clipped += !(0.0..=1.0).contains(&draw) as usize;
                if n.pixels[3 * p + c] != draw.clamp(0.0, 1.0) as f32 {
                    noise_mismatches += 1;
                }
            }
        }
    }

    let black_of = |i: usize| &black.data.images[i];
    let mixed_mismatches = mixed
        .data
        .images
        .iter()
        .enumerate()
        .filter(|(i, im)| {
            let removed = mixed.record.removed.contains(&im.id);
            let expected = if removed { black_of(*i) } else { &source.images[*i] };
            *im != expected
        })
        .count();

    TransformReport {
        images: source.len(),
        foreground_mismatches,
        black_background_sum,
        noise_samples: count,
        noise_mean: sum / count as f64,
        noise_mean_bound: 3.0 * noise.sigma / (count as f64).sqrt(),
        clipped_fraction: clipped as f64 / count as f64,
        noise_mismatches,
        mixed_removed: mixed.record.removed.len(),
        mixed_mismatches,
    }
}

/// Two-sided normal tail mass beyond `k` standard deviations, by Simpson
/// integration of the density over [0, k].
pub fn two_sided_tail(k: f64) -> f64 {
    let steps = 10_000;
    let h = k / steps as f64;
    let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = pdf(0.0) + pdf(k);
    for i in 1..steps {
        acc += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * acc * h / 3.0
}
