//! Feature-map dumps as binary PGM images.
//!
//! Each channel is min-max normalized on its own to `0..=255`. A constant
//! channel (including the all-zero output of a pruned filter) renders as
//! all zeros.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use crate::error::{MfpError, Result};
use crate::model::ModelState;
use crate::tensor::Tensor;

/// Maps one channel to 8-bit gray: `round(255 (v − min) / (max − min))`.
pub fn normalize_channel(values: &[f64]) -> Vec<u8> {
    let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if max <= min {
        return vec![0; values.len()];
    }
    let scale = 255.0 / (max - min);
    values.iter().map(|&v| ((v - min) * scale).round() as u8).collect()
}

pub fn write_pgm(path: &Path, pixels: &[u8], width: usize, height: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| MfpError::io(path, e))?;
    let encoder = PnmEncoder::new(BufWriter::new(file)).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    encoder
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| MfpError::Image(format!("{}: {e}", path.display())))
}

/// Writes `channel_<k>.pgm` for every output channel of conv layer
/// `layer` (post-ReLU) and returns the written paths in channel order.
pub fn render_feature_maps(model: &ModelState, image: &Tensor, layer: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let maps = model.feature_maps(image, layer)?;
    let (c, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    std::fs::create_dir_all(out_dir).map_err(|e| MfpError::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(c);
    for (k, channel) in maps.data().chunks_exact(h * w).enumerate() {
        let path = out_dir.join(format!("channel_{k}.pgm"));
        write_pgm(&path, &normalize_channel(channel), w, h)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Reads a PGM (one channel) or PPM (three channels) image as a
/// `[C, H, W]` tensor scaled to `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| MfpError::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        other => (3, other.to_rgb8().into_raw()),
    };
    let mut data = vec![0.0; channels * h * w];
    for (i, &v) in raw.iter().enumerate() {
        let (pixel, ch) = (i / channels, i % channels);
        data[ch * h * w + pixel] = v as f64 / 255.0;
    }
    Tensor::new(vec![channels, h, w], data)
}
