//! Grayscale image I/O and conversions.

use std::io::Cursor;
use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat};
pub use image::GrayImage;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read image {path}: {source}")]
    Read {
        path: String,
        source: image::ImageError,
    },
    #[error("cannot write image {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot encode image: {0}")]
    Encode(image::ImageError),
    #[error("buffer of {got} values does not match {width}x{height}")]
    Shape { got: usize, width: u32, height: u32 },
}

/// Loads an 8- or 16-bit grayscale (or color) PNG/JPEG as 8-bit luma.
pub fn load_gray(path: &Path) -> Result<GrayImage, ImageError> {
    let img = image::open(path).map_err(|source| ImageError::Read {
        path: path.display().to_string(),
        source,
    })?;
    Ok(match img {
        DynamicImage::ImageLuma8(g) => g,
        DynamicImage::ImageLuma16(g) => {
            let (w, h) = g.dimensions();
            GrayImage::from_fn(w, h, |x, y| image::Luma([(g.get_pixel(x, y)[0] >> 8) as u8]))
        }
        other => other.to_luma8(),
    })
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>, ImageError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(ImageError::Encode)?;
    Ok(buf.into_inner())
}

pub fn save_png(img: &GrayImage, path: &Path) -> Result<(), ImageError> {
    let bytes = encode_png(img)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| ImageError::Write {
            path: parent.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, bytes).map_err(|source| ImageError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// Resizes to a square `size x size` image; a no-op when already that size.
pub fn resize_square(img: &GrayImage, size: u32) -> GrayImage {
    if img.dimensions() == (size, size) {
        return img.clone();
    }
    image::imageops::resize(img, size, size, FilterType::Triangle)
}

/// Row-major intensities in [0, 1].
pub fn to_unit(img: &GrayImage) -> Vec<f32> {
    img.as_raw().iter().map(|&v| v as f32 / 255.0).collect()
}

pub fn from_unit(values: &[f32], width: u32, height: u32) -> Result<GrayImage, ImageError> {
    if values.len() != (width * height) as usize {
        return Err(ImageError::Shape {
            got: values.len(),
            width,
            height,
        });
    }
    let raw = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(GrayImage::from_raw(width, height, raw).expect("length checked"))
}
