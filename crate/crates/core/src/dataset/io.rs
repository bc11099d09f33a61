//! On-disk dataset layout:
//!
//! ```text
//! root/images/<id>.ppm   binary P6, 8-bit (PNG accepted on load)
//! root/masks/<id>.pgm    binary P5, 8-bit class values, 255 = VOID (PNG accepted on load)
//! root/labels.csv        header `id,label`
//! root/classes.json      ordered list of class names
//! ```

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{dominant_label, mask_class, ClassTable, Dataset, LabeledImage, VOID};
use crate::error::{Error, Result};
use crate::pnm;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    create_dir(&images_dir)?;
    create_dir(&masks_dir)?;
    dataset.images.par_iter().try_for_each(|im| -> Result<()> {
        let rgb: Vec<u8> = im.pixels.iter().map(|&v| pnm::quantize(v)).collect();
        write(&images_dir.join(format!("{}.ppm", im.id)), &pnm::encode_ppm(im.width, im.height, &rgb))?;
        write(&masks_dir.join(format!("{}.pgm", im.id)), &pnm::encode_pgm(im.width, im.height, &im.mask))
    })?;
    let mut csv = String::from("id,label\n");
    for im in &dataset.images {
        csv.push_str(&format!("{},{}\n", im.id, im.label));
    }
    write(&root.join("labels.csv"), csv.as_bytes())?;
    write(&root.join("classes.json"), serde_json::to_string_pretty(&dataset.classes)?.as_bytes())
}

/// Loads a dataset written by [`save_dataset`] (no resampling; images keep
/// their stored extents). Labels come from `labels.csv`.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let classes: ClassTable = serde_json::from_slice(&read(&root.join("classes.json"))?)?;
    let labels_path = root.join("labels.csv");
    let text = String::from_utf8(read(&labels_path)?)
        .map_err(|_| Error::Dataset(format!("{} is not UTF-8", labels_path.display())))?;
    let mut rows = text.lines();
    if rows.next().map(str::trim) != Some("id,label") {
        return Err(Error::Dataset(format!("{}: expected header `id,label`", labels_path.display())));
    }
    let entries = rows
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (id, label) = line
                .split_once(',')
                .ok_or_else(|| Error::Dataset(format!("bad labels.csv row {line:?}")))?;
            let label: usize = label
                .trim()
                .parse()
                .map_err(|_| Error::Dataset(format!("bad label in row {line:?}")))?;
            if label >= classes.len() {
                return Err(Error::Dataset(format!("{id}: label {label} out of range")));
            }
            Ok((id.trim().to_string(), label))
        })
        .collect::<Result<Vec<_>>>()?;
    let images = entries
        .par_iter()
        .map(|(id, label)| {
            let (w, h, rgb) = read_rgb(root, id)?;
            let (mw, mh, mask) = read_mask(root, id)?;
            if (mw, mh) != (w, h) {
                return Err(Error::Dataset(format!("{id}: mask is {mw}x{mh}, image is {w}x{h}")));
            }
            check_mask(id, &mask, &classes)?;
            let pixels = rgb.iter().map(|&b| pnm::dequantize(b)).collect();
            LabeledImage::new(id.clone(), w, h, pixels, mask, *label)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { classes, images })
}

/// Loads a VOC-style directory, center-cropping every image to a square and
/// resampling to `resolution` (bilinear for pixels, nearest for masks).
/// Each image's label is its mask's dominant class.
pub fn load_voc_style(root: &Path, classes: &ClassTable, resolution: usize) -> Result<Dataset> {
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let ids = list_image_ids(&root.join("images"))?;
    let images = ids
        .par_iter()
        .map(|id| {
            let (w, h, rgb) = read_rgb(root, id)?;
            let (mw, mh, mask) = read_mask(root, id)?;
            if (mw, mh) != (w, h) {
                return Err(Error::Dataset(format!("{id}: mask is {mw}x{mh}, image is {w}x{h}")));
            }
            check_mask(id, &mask, classes)?;
            let rgb = resize_bilinear(&center_crop(&rgb, w, h, 3), w.min(h), 3, resolution);
            let mask = resize_nearest(&center_crop(&mask, w, h, 1), w.min(h), resolution);
            let label = dominant_label(&mask).map_err(|_| Error::Dataset(format!("{id}: mask has no object pixels")))?;
            let pixels = rgb.iter().map(|&b| pnm::dequantize(b)).collect();
            LabeledImage::new(id.clone(), resolution, resolution, pixels, mask, label)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        classes: classes.clone(),
        images,
    })
}

fn list_image_ids(dir: &Path) -> Result<Vec<String>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "png")))
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
        .collect();
    ids.sort();
    ids.dedup();
    Ok(ids)
}

fn find_file(dir: &Path, id: &str, normative: &str) -> Option<(PathBuf, bool)> {
    let primary = dir.join(format!("{id}.{normative}"));
    if primary.exists() {
        return Some((primary, false));
    }
    let png = dir.join(format!("{id}.png"));
    png.exists().then_some((png, true))
}

fn read_rgb(root: &Path, id: &str) -> Result<(usize, usize, Vec<u8>)> {
    let (path, is_png) = find_file(&root.join("images"), id, "ppm")
        .ok_or_else(|| Error::Dataset(format!("missing image for id {id}")))?;
    let bytes = read(&path)?;
    if is_png {
        decode_png(&bytes, false)
    } else {
        pnm::decode_ppm(&bytes)
    }
}

fn read_mask(root: &Path, id: &str) -> Result<(usize, usize, Vec<u8>)> {
    let (path, is_png) = find_file(&root.join("masks"), id, "pgm")
        .ok_or_else(|| Error::Dataset(format!("missing mask for id {id}")))?;
    let bytes = read(&path)?;
    if is_png {
        decode_png(&bytes, true)
    } else {
        pnm::decode_pgm(&bytes)
    }
}

fn check_mask(id: &str, mask: &[u8], classes: &ClassTable) -> Result<()> {
    match mask.iter().find(|&&v| v != VOID && mask_class(v).is_some_and(|c| c >= classes.len())) {
        Some(v) => Err(Error::Dataset(format!("{id}: mask value {v} is not a known class"))),
        None => Ok(()),
    }
}

/// Decodes a PNG to 8-bit RGB, or to raw 8-bit indices/levels for masks
/// (palette entries are class indices in VOC masks).
fn decode_png(bytes: &[u8], as_mask: bool) -> Result<(usize, usize, Vec<u8>)> {
    let err = |detail: String| Error::Format { format: "png", detail };
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(if as_mask {
        png::Transformations::STRIP_16
    } else {
        png::Transformations::normalize_to_color8()
    });
    let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    if info.bit_depth != png::BitDepth::Eight {
        return Err(err(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    use png::ColorType::*;
    let out = match (as_mask, info.color_type) {
        (true, Indexed | Grayscale) => buf,
        (true, other) => return Err(err(format!("mask must be indexed or grayscale, got {other:?}"))),
        (false, Rgb) => buf,
        (false, Rgba) => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        (false, Grayscale) => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        (false, GrayscaleAlpha) => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        (false, Indexed) => return Err(err("palette was not expanded".into())),
    };
    Ok((w, h, out))
}

fn center_crop(data: &[u8], w: usize, h: usize, channels: usize) -> Vec<u8> {
    let side = w.min(h);
    let (x0, y0) = ((w - side) / 2, (h - side) / 2);
    let mut out = Vec::with_capacity(side * side * channels);
    for y in y0..y0 + side {
        let row = (y * w + x0) * channels;
        out.extend_from_slice(&data[row..row + side * channels]);
    }
    out
}

/// Half-pixel-centred bilinear resampling of a square 8-bit image; an
/// unchanged size reproduces the input exactly.
fn resize_bilinear(data: &[u8], side: usize, channels: usize, target: usize) -> Vec<u8> {
    let scale = side as f64 / target as f64;
    let coord = |d: usize| {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0u8; target * target * channels];
    for y in 0..target {
        let (y0, y1, fy) = coord(y);
        for x in 0..target {
            let (x0, x1, fx) = coord(x);
            for c in 0..channels {
                let at = |yy: usize, xx: usize| data[(yy * side + xx) * channels + c] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out[(y * target + x) * channels + c] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn resize_nearest(data: &[u8], side: usize, target: usize) -> Vec<u8> {
    let scale = side as f64 / target as f64;
    let src = |d: usize| (((d as f64 + 0.5) * scale).floor() as usize).min(side - 1);
    let mut out = vec![0u8; target * target];
    for y in 0..target {
        for x in 0..target {
            out[y * target + x] = data[src(y) * side + src(x)];
        }
    }
    out
}
