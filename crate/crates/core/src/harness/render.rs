//! PNG output for label rasters (fixed palette) and weight maps (grayscale).

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::write_atomic;
use crate::tensor::Tensor;

/// Background first, then one color per class; classes past the table reuse
/// it cyclically.
const PALETTE: [[u8; 3]; 17] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

/// RGB color of a label; 0 is black.
pub fn label_color(label: u16) -> [u8; 3] {
    if label == 0 {
        PALETTE[0]
    } else {
        PALETTE[1 + (label as usize - 1) % (PALETTE.len() - 1)]
    }
}

fn encode(width: usize, height: usize, color: png::ColorType, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(pixels)?;
        writer.finish()?;
    }
    Ok(out)
}

/// RGB PNG bytes of a label raster.
pub fn label_png(labels: &[u16], height: usize, width: usize) -> Result<Vec<u8>> {
    if labels.len() != height * width || labels.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} labels for {height}x{width}", labels.len())));
    }
    let pixels: Vec<u8> = labels.iter().flat_map(|&l| label_color(l)).collect();
    encode(width, height, png::ColorType::Rgb, &pixels)
}

/// 8-bit grayscale PNG bytes of an `[H, W, 1]` map with values in `[0, 1]`
/// (clamped), scaled to 0..=255.
pub fn weight_png(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = map.dims3();
    if c != 1 {
        return Err(Error::ShapeMismatch(format!("weight map has {c} channels")));
    }
    let pixels: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    encode(w, h, png::ColorType::Grayscale, &pixels)
}

pub fn render_labels(labels: &[u16], height: usize, width: usize, path: &Path) -> Result<()> {
    write_atomic(path, &label_png(labels, height, width)?)
}

pub fn render_weights(map: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &weight_png(map)?)
}
