//! 8-bit PNG export and import of `H x W x 3` images in `[0, 1]`.

use std::path::Path;

use crate::{Error, Result};

pub fn write_png(path: &Path, image: &[f64], width: usize, height: usize) -> Result<()> {
    if image.len() != width * height * 3 {
        return Err(Error::Shape(format!("{} values for a {width}x{height} image", image.len())));
    }
    let bytes: Vec<u8> = image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, width as u32, height as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Returns the image and its `(width, height)`.
pub fn read_png(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(), w as usize, h as usize))
}
