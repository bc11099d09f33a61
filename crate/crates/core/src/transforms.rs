//! The four training-set constructions: unmodified, black background,
//! Gaussian-noise background, and a half-and-half mix.
//!
//! Foreground is every pixel whose mask value names an object class; VOID
//! and background pixels are both replaced.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{is_foreground, stratified_order, Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::seed::{fnv1a64, hash_words, normal_at};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariantKind {
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "black")]
    BlackBackground,
    #[serde(rename = "noise")]
    NoiseBackground,
    #[serde(rename = "mixed")]
    Mixed,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::Standard,
        VariantKind::BlackBackground,
        VariantKind::NoiseBackground,
        VariantKind::Mixed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Standard => "standard",
            VariantKind::BlackBackground => "black",
            VariantKind::NoiseBackground => "noise",
            VariantKind::Mixed => "mixed",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    pub mean: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            mean: 0.5,
            sigma: 0.25,
            seed: 0,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.mean.is_finite() || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid noise parameters {self:?}")));
        }
        Ok(())
    }

    /// Unclipped noise value for one pixel channel. Depends only on the seed,
    /// image id and coordinates, never on processing order.
    pub fn draw(&self, image_id: &str, x: usize, y: usize, channel: usize) -> f64 {
        let counter = hash_words(&[self.seed, fnv1a64(image_id.as_bytes()), x as u64, y as u64, channel as u64]);
        self.mean + self.sigma * normal_at(counter)
    }
}

/// Zeroes every non-object pixel (elementwise product with the binary mask).
pub fn remove_background(img: &LabeledImage) -> LabeledImage {
    let mut out = img.clone();
    for (px, &m) in out.pixels.chunks_exact_mut(3).zip(&img.mask) {
        if !is_foreground(m) {
            px.fill(0.0);
        }
    }
    out
}

/// Replaces every non-object pixel channel with a clipped Gaussian draw.
pub fn noise_background(img: &LabeledImage, params: &NoiseParams) -> LabeledImage {
    let mut out = img.clone();
    for (p, (px, &m)) in out.pixels.chunks_exact_mut(3).zip(&img.mask).enumerate() {
        if is_foreground(m) {
            continue;
        }
        let (x, y) = (p % img.width, p / img.width);
        for (c, v) in px.iter_mut().enumerate() {
            *v = params.draw(&img.id, x, y, c).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Provenance of a built variant, written next to it as `variant.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub kind: VariantKind,
    pub noise: NoiseParams,
    pub seed: u64,
    /// Ids of background-removed images (Mixed only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub removed: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub data: Dataset,
    pub record: VariantRecord,
}

/// Builds one training-set variant ahead of training.
///
/// `Mixed` background-removes exactly `floor(n/2)` images, chosen by a
/// class-stratified seeded shuffle, and leaves the rest untouched.
pub fn build_variant(dataset: &Dataset, kind: VariantKind, noise: &NoiseParams, seed: u64) -> Result<Variant> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot build a variant of an empty dataset".into()));
    }
    noise.validate()?;
    let mut removed = Vec::new();
    let images: Vec<LabeledImage> = match kind {
        VariantKind::Standard => dataset.images.clone(),
        VariantKind::BlackBackground => dataset.images.par_iter().map(remove_background).collect(),
        VariantKind::NoiseBackground => dataset.images.par_iter().map(|im| noise_background(im, noise)).collect(),
        VariantKind::Mixed => {
            let order = stratified_order(&dataset.labels(), seed);
            let chosen: BTreeSet<usize> = order[..dataset.len() / 2].iter().copied().collect();
            removed = chosen.iter().map(|&i| dataset.images[i].id.clone()).collect();
            dataset
                .images
                .par_iter()
                .enumerate()
                .map(|(i, im)| if chosen.contains(&i) { remove_background(im) } else { im.clone() })
                .collect()
        }
    };
    Ok(Variant {
        data: Dataset {
            classes: dataset.classes.clone(),
            images,
        },
        record: VariantRecord {
            kind,
            noise: *noise,
            seed,
            removed,
        },
    })
}

/// Rebuilds a variant from its source and record; the `Mixed` membership
/// must match the record exactly.
pub fn rebuild_variant(dataset: &Dataset, record: &VariantRecord) -> Result<Variant> {
    let variant = build_variant(dataset, record.kind, &record.noise, record.seed)?;
    if variant.record.removed != record.removed {
        return Err(Error::Dataset(format!(
            "{} variant membership does not match its record",
            record.kind
        )));
    }
    Ok(variant)
}
