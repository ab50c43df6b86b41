//! Deterministic synthetic-lesion generator.
//!
//! Each sample is a filled ellipse mask (foreground fraction between 5% and
//! 40% of the pixels) rendered into a low-contrast grayscale image: the
//! lesion is darker than the surrounding background, with additive
//! speckle-like noise on top. Everything derives from a per-sample stream of
//! one seeded generator, so files are byte-identical across runs.

use std::path::Path;

use image::{GrayImage, Luma};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::{write_manifest, DatasetManifest, Sample};
use crate::error::{Error, Result};

/// Generate `n` image/mask pairs under `out_dir` (in `images/` and `masks/`)
/// plus a `manifest.tsv`. Returns the manifest with paths resolved onto
/// `out_dir`, ready for loading.
pub fn synth_dataset(
    n: usize,
    size: (usize, usize),
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let (h, w) = size;
    if n == 0 {
        return Err(Error::Config("synth_dataset: need at least one sample".into()));
    }
    if h == 0 || w == 0 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
        return Err(Error::Config(format!(
            "synth_dataset: size {h}x{w} must be divisible by 16"
        )));
    }
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;

    let digits = n.to_string().len().max(3);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);

        let mask = sample_mask(&mut rng, h, w)?;
        let image = render_image(&mut rng, &mask, h, w);

        let id = format!("synth_{i:0digits$}");
        let image_rel = format!("images/{id}.png");
        let mask_rel = format!("masks/{id}.png");
        save_gray(&out_dir.join(&image_rel), &image, h, w)?;
        save_gray(
            &out_dir.join(&mask_rel),
            &mask.iter().map(|&m| if m { 255 } else { 0 }).collect::<Vec<_>>(),
            h,
            w,
        )?;
        samples.push(Sample {
            id,
            image_path: image_rel.into(),
            mask_path: mask_rel.into(),
            fold: None,
        });
    }

    let manifest = DatasetManifest {
        samples,
        target_size: size,
        seed,
    };
    write_manifest(&manifest, &out_dir.join("manifest.tsv"))?;
    Ok(manifest.resolved(out_dir))
}

/// Rejection-sample a filled rotated ellipse whose foreground covers
/// between 5% and 40% of the frame.
fn sample_mask(rng: &mut ChaCha12Rng, h: usize, w: usize) -> Result<Vec<bool>> {
    for _ in 0..1000 {
        let cx = (0.25 + 0.5 * rng.gen::<f64>()) * w as f64;
        let cy = (0.25 + 0.5 * rng.gen::<f64>()) * h as f64;
        let a = (0.12 + 0.33 * rng.gen::<f64>()) * w as f64;
        let b = (0.12 + 0.33 * rng.gen::<f64>()) * h as f64;
        let theta = rng.gen::<f64>() * std::f64::consts::PI;
        let (sin, cos) = theta.sin_cos();

        let mut mask = vec![false; h * w];
        let mut fg = 0usize;
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let u = (dx * cos + dy * sin) / a;
                let v = (-dx * sin + dy * cos) / b;
                if u * u + v * v <= 1.0 {
                    mask[y * w + x] = true;
                    fg += 1;
                }
            }
        }
        let fraction = fg as f64 / (h * w) as f64;
        if (0.05..=0.40).contains(&fraction) {
            return Ok(mask);
        }
    }
    Err(Error::Numeric(
        "synth_dataset: could not sample an ellipse within the foreground bounds".into(),
    ))
}

fn render_image(rng: &mut ChaCha12Rng, mask: &[bool], h: usize, w: usize) -> Vec<u8> {
    let background = 0.55 + 0.12 * rng.gen::<f64>();
    let lesion = 0.22 + 0.12 * rng.gen::<f64>();
    let noise_amp = 0.06 + 0.04 * rng.gen::<f64>();
    let mut out = Vec::with_capacity(h * w);
    for &m in mask.iter().take(h * w) {
        let base = if m { lesion } else { background };
        let noise = (rng.gen::<f64>() * 2.0 - 1.0) * noise_amp;
        let v = (base + noise).clamp(0.0, 1.0);
        out.push((v * 255.0).round() as u8);
    }
    out
}

fn save_gray(path: &Path, pixels: &[u8], h: usize, w: usize) -> Result<()> {
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([pixels[y as usize * w + x as usize]])
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })
}
