//! Raster file input and output.

use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::datamodel::SaliencyMap;
use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor3};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an image as RGB in [0,1], resized to `size` (height, width) when
/// it differs.
pub fn read_rgb(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor3> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let img = match size {
        Some((h, w)) if (img.height() as usize, img.width() as usize) != (h, w) => {
            image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
        }
        _ => img,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor3::from_fn(3, h, w, |c, i, j| {
        img.get_pixel(j as u32, i as u32).0[c] as f64 / 255.0
    }))
}

/// Reads a mask; pixels above mid-gray are foreground. Resizing uses
/// nearest-neighbour sampling.
pub fn read_mask(path: &Path, size: Option<(usize, usize)>) -> Result<Mask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let img = match size {
        Some((h, w)) if (img.height() as usize, img.width() as usize) != (h, w) => {
            image::imageops::resize(&img, w as u32, h as u32, FilterType::Nearest)
        }
        _ => img,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Mask::from_fn(h, w, |i, j| img.get_pixel(j as u32, i as u32).0[0] > 127))
}

/// Single-channel PNG with 0 / 255 encoding.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    ensure_parent(path)?;
    let img: GrayImage = ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Grayscale PNG of a saliency map divided by its maximum.
pub fn write_saliency(path: &Path, map: &SaliencyMap) -> Result<()> {
    ensure_parent(path)?;
    let max = map.max();
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let img: GrayImage = ImageBuffer::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        Luma([to_u8(map.get(y as usize, x as usize) * scale)])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn write_rgb(path: &Path, pixels: &Tensor3) -> Result<()> {
    ensure_parent(path)?;
    if pixels.channels() != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", pixels.channels())));
    }
    let img: RgbImage = ImageBuffer::from_fn(pixels.width() as u32, pixels.height() as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        Rgb([to_u8(pixels.get(0, i, j)), to_u8(pixels.get(1, i, j)), to_u8(pixels.get(2, i, j))])
    });
    img.save(path).map_err(|e| image_err(path, e))
}
