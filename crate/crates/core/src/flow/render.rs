use std::path::Path;

use super::AttentionFlowResult;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Black border between montage tiles, in pixels.
pub const GUTTER: usize = 2;

/// 8-bit interleaved RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn black(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (`P6`, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

const ANCHORS: [(f64, [f64; 3]); 5] = [
    (0.0, [0.0, 0.0, 255.0]),
    (0.25, [0.0, 255.0, 255.0]),
    (0.5, [0.0, 255.0, 0.0]),
    (0.75, [255.0, 255.0, 0.0]),
    (1.0, [255.0, 0.0, 0.0]),
];

fn colormap_f(v: f64) -> Result<[f64; 3]> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::OutOfRange(v));
    }
    let k = ANCHORS.windows(2).position(|w| v <= w[1].0).expect("v ≤ 1");
    let ((a, ca), (b, cb)) = (ANCHORS[k], ANCHORS[k + 1]);
    let t = (v - a) / (b - a);
    Ok([0, 1, 2].map(|i| ca[i] + t * (cb[i] - ca[i])))
}

fn round_half_up(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Blue, cyan, green, yellow, red at 0, ¼, ½, ¾, 1.
pub fn colormap(v: f64) -> Result<[u8; 3]> {
    Ok(colormap_f(v)?.map(round_half_up))
}

/// Colours a `[0, 1]` map; with a base image each channel is
/// `0.5·base + 0.5·heat`.
pub fn render_heatmap(map01: &Tensor, base: Option<&RgbImage>) -> Result<RgbImage> {
    let dims = map01.shape().dims();
    let [h, w] = dims else {
        return Err(Error::ShapeMismatch(format!(
            "heatmap needs a 2-D map, got {}",
            map01.shape()
        )));
    };
    let (h, w) = (*h, *w);
    if let Some(b) = base {
        if (b.width, b.height) != (w, h) {
            return Err(Error::ShapeMismatch(format!(
                "base image is {}×{}, map is {w}×{h}",
                b.width, b.height
            )));
        }
    }
    let mut img = RgbImage::black(w, h);
    for (i, &v) in map01.data().iter().enumerate() {
        let heat = colormap_f(v)?;
        let rgb = match base {
            Some(b) => [0, 1, 2].map(|c| round_half_up(0.5 * b.data[i * 3 + c] as f64 + 0.5 * heat[c])),
            None => heat.map(round_half_up),
        };
        img.data[i * 3..i * 3 + 3].copy_from_slice(&rgb);
    }
    Ok(img)
}

/// Gray rendering of a `C × H × W` tensor: channel mean, min-max scaled.
pub fn gray_base(input: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = input.shape().as_chw()?;
    let hw = h * w;
    let mean: Vec<f64> = (0..hw)
        .map(|i| (0..c).map(|d| input.data()[d * hw + i]).sum::<f64>() / c as f64)
        .collect();
    let (lo, hi) = mean
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut img = RgbImage::black(w, h);
    for (i, v) in mean.iter().enumerate() {
        let g = if hi > lo {
            round_half_up(255.0 * (v - lo) / (hi - lo))
        } else {
            0
        };
        img.data[i * 3..i * 3 + 3].copy_from_slice(&[g; 3]);
    }
    Ok(img)
}

/// Row-major grid of equally sized tiles separated by black gutters.
pub fn tile_grid(tiles: &[RgbImage], columns: usize) -> Result<RgbImage> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::ShapeMismatch("montage needs at least one tile".into()))?;
    let (tw, th) = (first.width, first.height);
    if tiles.iter().any(|t| (t.width, t.height) != (tw, th)) {
        return Err(Error::ShapeMismatch("montage tiles differ in size".into()));
    }
    let cols = columns.clamp(1, tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let mut out = RgbImage::black(cols * tw + (cols - 1) * GUTTER, rows * th + (rows - 1) * GUTTER);
    for (k, tile) in tiles.iter().enumerate() {
        let (x0, y0) = ((k % cols) * (tw + GUTTER), (k / cols) * (th + GUTTER));
        for y in 0..th {
            let src = &tile.data[y * tw * 3..(y + 1) * tw * 3];
            let start = ((y0 + y) * out.width + x0) * 3;
            out.data[start..start + tw * 3].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Overlays of every layer laid out `columns` to a row.
pub fn montage(flow: &AttentionFlowResult, base: Option<&RgbImage>, columns: usize) -> Result<RgbImage> {
    let tiles = flow
        .maps
        .iter()
        .map(|m| render_heatmap(&m.normalized, base))
        .collect::<Result<Vec<_>>>()?;
    tile_grid(&tiles, columns)
}
