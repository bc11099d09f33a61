//! Binary Netpbm codecs: P6 (RGB) and P5 (grayscale), 8 bits per sample.

use crate::error::{Error, Result};

/// Maps a `[0,1]` intensity to 8 bits with round-half-up; out-of-range values saturate.
pub fn quantize(v: f32) -> u8 {
    let scaled = (v as f64 * 255.0 + 0.5).floor();
    scaled.clamp(0.0, 255.0) as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "ppm payload size");
    encode("P6", width, height, rgb)
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height, "pgm payload size");
    encode("P5", width, height, gray)
}

fn encode(magic: &str, width: usize, height: usize, payload: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(payload);
    out
}

/// Decodes a P6 image into `(width, height, rgb bytes)`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    decode(bytes, b"P6", 3, "ppm")
}

/// Decodes a P5 image into `(width, height, gray bytes)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    decode(bytes, b"P5", 1, "pgm")
}

fn decode(bytes: &[u8], magic: &[u8], channels: usize, format: &'static str) -> Result<(usize, usize, Vec<u8>)> {
    let err = |detail: String| Error::Format { format, detail };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(err(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated or non-numeric header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("header value out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err(format!("empty image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(err(format!("only maxval 255 is supported, got {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err("missing whitespace after header".into()));
    }
    pos += 1;
    let need = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(err(format!("payload has {} bytes, expected {need}", payload.len())));
    }
    Ok((width, height, payload[..need].to_vec()))
}
