//! Segmented, labeled images and the sources that produce them.
//!
//! Masks use the VOC convention: `0` is background, `255` is VOID
//! (boundary/unknown), and class `c` of the [`ClassTable`] is stored as
//! `c + 1`.

mod io;
mod split;
mod synthetic;

pub use io::{load_dataset, load_voc_style, save_dataset};
pub(crate) use split::stratified_order;
pub use split::{split, SplitFractions, Splits};
pub use synthetic::{
    class_background_hue, class_hue, generate_synthetic, BackgroundMode, SyntheticConfig, SHAPE_FAMILIES,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const VOID: u8 = 255;
/// Largest class count representable in an 8-bit mask.
pub const MAX_CLASSES: usize = 254;

/// Mask value encoding class index `class`.
pub fn mask_value(class: usize) -> u8 {
    assert!(class < MAX_CLASSES, "class index {class} does not fit a mask");
    class as u8 + 1
}

/// Class index encoded by a mask value, if it marks an object pixel.
pub fn mask_class(value: u8) -> Option<usize> {
    match value {
        BACKGROUND | VOID => None,
        v => Some(v as usize - 1),
    }
}

/// Object pixels are any non-background, non-VOID mask value.
pub fn is_foreground(value: u8) -> bool {
    mask_class(value).is_some()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassTable {
    names: Vec<String>,
}

impl ClassTable {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Dataset(format!("need at least 2 classes, got {}", names.len())));
        }
        if names.len() > MAX_CLASSES {
            return Err(Error::Dataset(format!("at most {MAX_CLASSES} classes are supported")));
        }
        let mut sorted = names.clone();
        sorted.sort();
        if let Some(dup) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Dataset(format!("duplicate class name {:?}", dup[0])));
        }
        Ok(ClassTable { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        self.names.get(class).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for ClassTable {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        ClassTable::new(names)
    }
}

impl From<ClassTable> for Vec<String> {
    fn from(table: ClassTable) -> Self {
        table.names
    }
}

/// An RGB image in `[0,1]` (row-major, channels interleaved) with its
/// segmentation mask and image-level label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub mask: Vec<u8>,
    pub label: usize,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, width: usize, height: usize, pixels: Vec<f32>, mask: Vec<u8>, label: usize) -> Result<Self> {
        let id = id.into();
        if pixels.len() != width * height * 3 {
            return Err(Error::Dataset(format!(
                "{id}: {} pixel values for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        if mask.len() != width * height {
            return Err(Error::Dataset(format!("{id}: mask extent does not match pixels")));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Dataset(format!("{id}: pixel value {v} outside [0,1]")));
        }
        Ok(LabeledImage {
            id,
            width,
            height,
            pixels,
            mask,
            label,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.mask.iter().filter(|&&m| is_foreground(m)).count();
        fg as f64 / self.num_pixels() as f64
    }

    /// Pixels in planar `[3, H, W]` order, as the classifier consumes them.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.num_pixels();
        let mut out = vec![0.0; plane * 3];
        for (p, rgb) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = rgb[c];
            }
        }
        out
    }
}

/// Images sharing one class table.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: ClassTable,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|im| im.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for im in &self.images {
            counts[im.label] += 1;
        }
        counts
    }

    /// Common square resolution, or `None` when empty or mixed.
    pub fn resolution(&self) -> Option<usize> {
        let first = self.images.first()?;
        let res = first.width;
        self.images
            .iter()
            .all(|im| im.width == res && im.height == res)
            .then_some(res)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            classes: self.classes.clone(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }
}

/// Class with the most object pixels; ties go to the lower index and
/// background/VOID pixels are ignored.
pub fn dominant_label(mask: &[u8]) -> Result<usize> {
    let mut counts = [0usize; 256];
    for &m in mask {
        counts[m as usize] += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (value, &count) in counts.iter().enumerate() {
        let Some(class) = mask_class(value as u8) else { continue };
        if count > 0 && best.is_none_or(|(_, c)| count > c) {
            best = Some((class, count));
        }
    }
    best.map(|(class, _)| class)
        .ok_or_else(|| Error::Dataset("mask has no object pixels".into()))
}
