//! JPEG/PNG decoding into `[3,H,W]` tensors in `[0,1]`, and PNG output.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

fn image_error(path: &Path, err: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: err.to_string(),
    }
}

/// Decodes an 8-bit image as RGB, scaled to `[0,1]`, without resizing.
pub fn decode_rgb(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| image_error(path, e))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

/// Decodes and bilinearly resizes (align-corners) to `size × size`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = decode_rgb(path)?;
    ops::bilinear_resize_channels(&img, size, size)
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("consistent dimensions")
}

/// Quantizes a `[3,H,W]` tensor to 8-bit RGB with rounding and clamping.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let &[3, h, w] = t.shape() else {
        return Err(Error::Shape {
            op: "tensor_to_rgb",
            shape: t.shape().to_vec(),
            reason: "expected [3,H,W]",
        });
    };
    let d = t.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            raw.push(quantize(d[c * h * w + i]));
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer length matches"))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let img = tensor_to_rgb(t)?;
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => image_error(path, other),
        })
}
