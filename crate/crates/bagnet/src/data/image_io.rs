//! Image decoding and the two resamplers used in preprocessing.

use std::path::Path;

use image::{DynamicImage, ImageReader};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Decode an 8-bit grayscale image; color inputs are reduced by channel
/// averaging. Returns `(pixels, width, height)` row-major.
pub fn load_gray_image(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw(),
        DynamicImage::ImageLumaA8(g) => g.pixels().map(|p| p.0[0]).collect(),
        other => {
            let rgb = other.to_rgb8();
            rgb.pixels()
                .map(|p| {
                    let sum = p.0[0] as f32 + p.0[1] as f32 + p.0[2] as f32;
                    (sum / 3.0).round() as u8
                })
                .collect()
        }
    };
    Ok((pixels, w, h))
}

/// Bilinear resampling with half-pixel-center alignment, edge-clamped.
pub fn resize_bilinear(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    assert_eq!(src.len(), sw * sh);
    let mut out = vec![0.0f32; dw * dh];
    let sx_scale = sw as f64 / dw as f64;
    let sy_scale = sh as f64 / dh as f64;
    for dy in 0..dh {
        let fy = ((dy as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = (fy - y0 as f64) as f32;
        for dx in 0..dw {
            let fx = ((dx as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = (fx - x0 as f64) as f32;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bottom = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            out[dy * dw + dx] = top * (1.0 - wy) + bottom * wy;
        }
    }
    out
}

/// Nearest-neighbor resampling; preserves the value set exactly.
pub fn resize_nearest(src: &[u8], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<u8> {
    assert_eq!(src.len(), sw * sh);
    let mut out = vec![0u8; dw * dh];
    let sx_scale = sw as f64 / dw as f64;
    let sy_scale = sh as f64 / dh as f64;
    for dy in 0..dh {
        let sy = (((dy as f64 + 0.5) * sy_scale).floor() as usize).min(sh - 1);
        for dx in 0..dw {
            let sx = (((dx as f64 + 0.5) * sx_scale).floor() as usize).min(sw - 1);
            out[dy * dw + dx] = src[sy * sw + sx];
        }
    }
    out
}

/// Load one sample as `(image, mask)` tensors of shape `(1, 1, h, w)`.
///
/// The image is scaled to `[0,1]` by division by 255 and resized
/// bilinearly; the mask is resized nearest-neighbor and binarized
/// (any nonzero value becomes 1).
pub fn load_sample(sample: &Sample, target_size: (usize, usize)) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = target_size;
    let (img, iw, ih) = load_gray_image(&sample.image_path)?;
    let (msk, mw, mh) = load_gray_image(&sample.mask_path)?;
    if (iw, ih) != (mw, mh) {
        return Err(Error::Sample {
            id: sample.id.clone(),
            message: format!("image is {iw}x{ih} but mask is {mw}x{mh}"),
        });
    }
    let img_f: Vec<f32> = img.iter().map(|&v| v as f32 / 255.0).collect();
    let img_resized = resize_bilinear(&img_f, iw, ih, w, h);
    let msk_resized = resize_nearest(&msk, mw, mh, w, h);

    let shape = Shape::new(1, 1, h, w)?;
    let image = Tensor::new(shape, img_resized)?;
    let mask = Tensor::new(
        shape,
        msk_resized
            .iter()
            .map(|&v| if v != 0 { 1.0 } else { 0.0 })
            .collect(),
    )?;
    Ok((image, mask))
}

/// Write the input image with the predicted mask's boundary burned in at
/// full intensity. A boundary pixel is a foreground pixel with at least one
/// 4-neighbor outside the mask (or on the frame edge).
pub fn write_boundary_overlay(
    path: &Path,
    image: &Tensor<f32>,
    binary_mask: &Tensor<f32>,
) -> Result<()> {
    let s = image.shape();
    if binary_mask.shape() != s {
        return Err(Error::ShapeMismatch {
            op: "overlay",
            lhs: s.to_string(),
            rhs: binary_mask.shape().to_string(),
        });
    }
    let (h, w) = (s.h, s.w);
    let img = image.plane(0, 0);
    let mask = binary_mask.plane(0, 0);
    let fg = |y: isize, x: isize| -> bool {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            return false;
        }
        mask[y as usize * w + x as usize] == 1.0
    };
    let mut pixels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let boundary = mask[i] == 1.0
                && (!fg(y as isize - 1, x as isize)
                    || !fg(y as isize + 1, x as isize)
                    || !fg(y as isize, x as isize - 1)
                    || !fg(y as isize, x as isize + 1));
            pixels[i] = if boundary {
                255
            } else {
                (img[i].clamp(0.0, 1.0) * 255.0).round() as u8
            };
        }
    }
    let out = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([pixels[y as usize * w + x as usize]])
    });
    out.save(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })
}
