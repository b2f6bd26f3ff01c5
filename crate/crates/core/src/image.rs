//! Input loading: PPM images, raw planar f32 tensors and support vectors.

use std::fs;
use std::path::Path;

use crate::attribution::{FeatureVector, VectorRole};
use crate::error::{Error, Result};
use crate::flow::RgbImage;
use crate::tensor::{Shape, Tensor};

pub const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Parses binary PPM (`P6`) or PGM (`P5`); gray is replicated into RGB.
pub fn parse_pnm(bytes: &[u8]) -> Result<RgbImage> {
    let bad = |m: &str| Error::Format(format!("image: {m}"));
    let magic = bytes.get(..2).ok_or_else(|| bad("file too short"))?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(bad("expected a binary PPM (P6) or PGM (P5) header")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit images (maxval 1..=255) are supported"));
    }
    let n = width * height * channels;
    let pixels = bytes.get(pos..pos + n).ok_or_else(|| bad("pixel data is truncated"))?;
    let scale = |v: u8| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8;
    let data = if channels == 3 {
        pixels.iter().map(|&v| scale(v)).collect()
    } else {
        pixels.iter().flat_map(|&v| [scale(v); 3]).collect()
    };
    Ok(RgbImage { width, height, data })
}

pub fn read_pnm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes)
}

/// Scales to `[0, 1]` and normalises with the ImageNet statistics. A
/// one-channel model sees the RGB average normalised with averaged constants.
pub fn preprocess(img: &RgbImage, shape: &Shape) -> Result<Tensor> {
    let (c, h, w) = shape.as_chw()?;
    if (img.height, img.width) != (h, w) {
        return Err(Error::Format(format!(
            "image is {}×{} but the model expects {w}×{h}",
            img.width, img.height
        )));
    }
    let hw = h * w;
    let px = |i: usize, ch: usize| img.data[i * 3 + ch] as f64 / 255.0;
    let data = match c {
        3 => (0..3)
            .flat_map(|ch| (0..hw).map(move |i| (px(i, ch) - MEAN[ch]) / STD[ch]))
            .collect(),
        1 => {
            let mean = MEAN.iter().sum::<f64>() / 3.0;
            let std = STD.iter().sum::<f64>() / 3.0;
            (0..hw)
                .map(|i| ((px(i, 0) + px(i, 1) + px(i, 2)) / 3.0 - mean) / std)
                .collect()
        }
        _ => {
            return Err(Error::Format(format!(
                "images can only feed 1- or 3-channel models, this one has {c}"
            )))
        }
    };
    Tensor::new(shape.clone(), data)
}

fn f32s(bytes: &[u8], what: &str) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Format(format!(
            "{what}: {} bytes is not a whole number of f32 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// A loaded model input and, for images, the picture for overlays.
#[derive(Clone, Debug)]
pub struct LoadedInput {
    pub tensor: Tensor,
    pub image: Option<RgbImage>,
}

/// Reads a PPM/PGM image (preprocessed) or a raw planar little-endian f32
/// tensor (used as-is).
pub fn load_input(path: &Path, shape: &Shape) -> Result<LoadedInput> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        let img = parse_pnm(&bytes)?;
        let tensor = preprocess(&img, shape)?;
        return Ok(LoadedInput {
            tensor,
            image: Some(img),
        });
    }
    let data = f32s(&bytes, "raw input")?;
    if data.len() != shape.numel() {
        return Err(Error::Format(format!(
            "raw input holds {} values, the model expects {} ({shape})",
            data.len(),
            shape.numel()
        )));
    }
    let tensor = Tensor::new(shape.clone(), data)?;
    tensor.ensure_finite("raw input")?;
    Ok(LoadedInput { tensor, image: None })
}

/// Writes a tensor as raw planar little-endian f32.
pub fn write_raw_f32(t: &Tensor, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// JSON array of numbers or raw little-endian f32.
pub fn read_support(path: &Path) -> Result<FeatureVector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_json =
        path.extension().is_some_and(|e| e == "json") || bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'[');
    let values = if is_json {
        serde_json::from_slice::<Vec<f64>>(&bytes)
            .map_err(|e| Error::Format(format!("support vector {}: {e}", path.display())))?
    } else {
        f32s(&bytes, "support vector")?
    };
    FeatureVector::new(values, VectorRole::Support).map_err(|e| match e {
        Error::Shape(m) | Error::NonFinite(m) => Error::Format(format!("support vector: {m}")),
        other => other,
    })
}
