//! PNG/PGM reading and writing with path-carrying errors.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other),
    })
}

/// Gray inputs are replicated to three channels.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(open(path)?.to_rgb8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(open(path)?.to_luma8())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    Ok(BinaryMask::from_gray(&read_gray(path)?))
}

fn format_for(path: &Path) -> ImageFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm" | "ppm" | "pnm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    }
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, format_for(path))
        .map_err(|e| Error::format(path, e))
}

pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    img.save_with_format(path, format_for(path))
        .map_err(|e| Error::format(path, e))
}

/// Writes 0/255.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_gray(path, &mask.to_gray())
}
