//! 8-bit PNG helpers for images, masks and edge maps.

use std::path::Path;

use crate::error::{MvsError, Result};
use crate::grid::Grid;

/// Load an image as grayscale intensity in `[0, 1]`; RGB collapses to
/// `(r + g + b) / 3`.
pub fn read_intensity(path: &Path) -> Result<Grid<f32>> {
    let img = image::open(path).map_err(|e| MvsError::format(path, e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |x, y| {
        let p = rgb.get_pixel(x as u32, y as u32);
        (p[0] as f32 + p[1] as f32 + p[2] as f32) / (3.0 * 255.0)
    }))
}

/// Save an intensity grid as 8-bit grayscale.
pub fn write_intensity(path: &Path, map: &Grid<f32>) -> Result<()> {
    let img = image::GrayImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        let v = map.get(x as usize, y as usize).clamp(0.0, 1.0);
        image::Luma([(v * 255.0).round() as u8])
    });
    img.save(path)
        .map_err(|e| MvsError::format(path, e.to_string()))
}

/// Load a binary mask: any nonzero sample is `true`.
pub fn read_mask(path: &Path) -> Result<Grid<bool>> {
    let img = image::open(path).map_err(|e| MvsError::format(path, e.to_string()))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |x, y| {
        gray.get_pixel(x as u32, y as u32)[0] > 0
    }))
}

/// Save a binary mask as 0/255 grayscale.
pub fn write_mask(path: &Path, mask: &Grid<bool>) -> Result<()> {
    let img = image::GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if *mask.get(x as usize, y as usize) {
            255
        } else {
            0
        }])
    });
    img.save(path)
        .map_err(|e| MvsError::format(path, e.to_string()))
}

/// Save a label map as an indexed-looking grayscale PNG for debugging.
pub fn write_labels(path: &Path, labels: &Grid<u32>) -> Result<()> {
    let img = image::GrayImage::from_fn(labels.width() as u32, labels.height() as u32, |x, y| {
        let l = *labels.get(x as usize, y as usize);
        image::Luma([if l == 0 { 0 } else { (l % 254 + 1) as u8 }])
    });
    img.save(path)
        .map_err(|e| MvsError::format(path, e.to_string()))
}
