//! Photometric and crop augmentations applied to training views.

use image::{imageops::FilterType, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Maximum relative change for brightness, contrast and saturation; each
/// factor is drawn uniformly from `[1 - x, 1 + x]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        ColorJitter {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
        }
    }
}

fn factor<R: Rng>(rng: &mut R, amount: f64) -> f64 {
    if amount <= 0.0 {
        1.0
    } else {
        rng.gen_range((1.0 - amount).max(0.0)..=1.0 + amount)
    }
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

pub fn color_jitter<R: Rng>(img: &RgbImage, jitter: &ColorJitter, rng: &mut R) -> RgbImage {
    let b = factor(rng, jitter.brightness);
    let c = factor(rng, jitter.contrast);
    let s = factor(rng, jitter.saturation);
    let n = f64::from(img.width() * img.height()).max(1.0);
    let mean = img
        .pixels()
        .map(|p| luma([f64::from(p[0]), f64::from(p[1]), f64::from(p[2])]) * b)
        .sum::<f64>()
        / n;
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        let mut v = [f64::from(p[0]) * b, f64::from(p[1]) * b, f64::from(p[2]) * b];
        for ch in &mut v {
            *ch = (*ch - mean) * c + mean;
        }
        let g = luma(v);
        let out = v.map(|ch| (g + (ch - g) * s).round().clamp(0.0, 255.0) as u8);
        Rgb(out)
    })
}

/// Crops a random region covering `scale` of the area (aspect ratio in
/// `[3/4, 4/3]`) and resizes it back to the original size.
pub fn random_resized_crop<R: Rng>(img: &RgbImage, scale: (f64, f64), rng: &mut R) -> RgbImage {
    let (w, h) = img.dimensions();
    let area = f64::from(w * h);
    let target = area * rng.gen_range(scale.0.min(scale.1)..=scale.0.max(scale.1));
    let log_ratio = rng.gen_range((3f64 / 4.0).ln()..=(4f64 / 3.0).ln());
    let ratio = log_ratio.exp();
    let cw = ((target * ratio).sqrt().round() as u32).clamp(1, w);
    let ch = ((target / ratio).sqrt().round() as u32).clamp(1, h);
    let x0 = rng.gen_range(0..=w - cw);
    let y0 = rng.gen_range(0..=h - ch);
    let crop = image::imageops::crop_imm(img, x0, y0, cw, ch).to_image();
    image::imageops::resize(&crop, w, h, FilterType::Triangle)
}
