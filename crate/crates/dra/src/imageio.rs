//! Image files to and from [`ImageTensor`].

use std::path::Path;

use dra_core::featurenet::resize_bilinear;
use dra_core::{Array3, ImageTensor};
use image::{ImageReader, RgbImage};

use crate::error::{io_err, Error, Result};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Reads only the header and returns `(width, height)`.
pub fn probe_dimensions(path: &Path) -> Result<(u32, u32)> {
    ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?
        .into_dimensions()
        .map_err(|e| image_err(path, e))
}

/// Decodes an image as RGB in `[0, 1]`, resampled to `size × size` when given.
pub fn load_image(path: &Path, size: Option<usize>) -> Result<ImageTensor> {
    let img = ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?
        .decode()
        .map_err(|e| image_err(path, e))?
        .to_rgb8();
    let t = from_rgb8(&img);
    Ok(match size {
        Some(s) if (t.height(), t.width()) != (s, s) => {
            ImageTensor::new(resize_bilinear(t.pixels(), s, s)).map_err(|e| image_err(path, e))?
        }
        _ => t,
    })
}

pub fn from_rgb8(img: &RgbImage) -> ImageTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut a = Array3::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            a.set(c, y as usize, x as usize, px.0[c] as f64 / 255.0);
        }
    }
    ImageTensor::new(a).expect("8-bit pixels are in range")
}

pub fn to_rgb8(t: &ImageTensor) -> RgbImage {
    let a = t.pixels();
    RgbImage::from_fn(t.width() as u32, t.height() as u32, |x, y| {
        let px = |c| (a.get(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_png(t: &ImageTensor, path: &Path) -> Result<()> {
    to_rgb8(t)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}
