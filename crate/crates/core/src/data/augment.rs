//! Training-time augmentation: random crop to the model input size, optional
//! horizontal flip with the matching left/right word swap in the report,
//! small rotation with edge replication, and brightness/contrast jitter.

use rand::Rng;

use super::GrayImage;
use crate::error::{Error, Result};

/// Pixels cropped away from the canonical image (256 → 224 by default).
pub const CROP_MARGIN: usize = 32;

/// One concrete draw of the augmentation pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub crop_x: usize,
    pub crop_y: usize,
    pub flip: bool,
    pub angle_deg: f64,
    pub brightness: f32,
    pub contrast: f32,
}

impl AugmentParams {
    /// Deterministic no-op draw: center crop, no flip, no rotation, no jitter.
    pub fn identity() -> Self {
        AugmentParams {
            crop_x: CROP_MARGIN / 2,
            crop_y: CROP_MARGIN / 2,
            flip: false,
            angle_deg: 0.0,
            brightness: 1.0,
            contrast: 1.0,
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        AugmentParams {
            crop_x: rng.gen_range(0..=CROP_MARGIN),
            crop_y: rng.gen_range(0..=CROP_MARGIN),
            flip: rng.gen_bool(0.5),
            angle_deg: rng.gen_range(-10.0..=10.0),
            brightness: rng.gen_range(0.8..=1.2),
            contrast: rng.gen_range(0.8..=1.2),
        }
    }
}

/// Apply a drawn augmentation to a canonical image. The input must be square
/// and exactly `CROP_MARGIN` larger than the output.
pub fn apply_image(img: &GrayImage, p: &AugmentParams) -> Result<GrayImage> {
    if img.size <= CROP_MARGIN {
        return Err(Error::Data(format!(
            "augment input of size {} cannot be cropped by {}",
            img.size, CROP_MARGIN
        )));
    }
    let out_size = img.size - CROP_MARGIN;
    if p.crop_x > CROP_MARGIN || p.crop_y > CROP_MARGIN {
        return Err(Error::Contract(format!(
            "crop offset ({},{}) exceeds margin {}",
            p.crop_x, p.crop_y, CROP_MARGIN
        )));
    }

    let mut out = GrayImage::new(out_size);
    for y in 0..out_size {
        for x in 0..out_size {
            out.pixels[y * out_size + x] = img.pixels[(y + p.crop_y) * img.size + (x + p.crop_x)];
        }
    }
    if p.flip {
        out = flip_horizontal(&out);
    }
    if p.angle_deg != 0.0 {
        out = rotate(&out, p.angle_deg);
    }
    if p.brightness != 1.0 || p.contrast != 1.0 {
        out = jitter(&out, p.brightness, p.contrast);
    } else {
        for v in out.pixels.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// The packaged augmentation of the pre-training pipeline: draw parameters,
/// transform the image, and swap left/right words in the report iff the image
/// was flipped.
pub fn augment(img: &GrayImage, report: &str, rng: &mut impl Rng) -> Result<(GrayImage, String)> {
    let p = AugmentParams::sample(rng);
    let out = apply_image(img, &p)?;
    let report = if p.flip { swap_left_right(report) } else { report.to_string() };
    Ok((out, report))
}

pub fn flip_horizontal(img: &GrayImage) -> GrayImage {
    let n = img.size;
    let mut out = GrayImage::new(n);
    for y in 0..n {
        for x in 0..n {
            out.pixels[y * n + x] = img.pixels[y * n + (n - 1 - x)];
        }
    }
    out
}

/// Rotate about the image center, bilinear sampling with edge replication.
fn rotate(img: &GrayImage, angle_deg: f64) -> GrayImage {
    let n = img.size;
    let c = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut out = GrayImage::new(n);
    for y in 0..n {
        for x in 0..n {
            // inverse map the output pixel into the source image
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let sx = cos * dx + sin * dy + c;
            let sy = -sin * dx + cos * dy + c;
            out.pixels[y * n + x] = sample_bilinear(img, sx, sy);
        }
    }
    out
}

fn sample_bilinear(img: &GrayImage, x: f64, y: f64) -> f32 {
    let n = img.size as f64;
    let x = x.clamp(0.0, n - 1.0);
    let y = y.clamp(0.0, n - 1.0);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.size - 1);
    let y1 = (y0 + 1).min(img.size - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let at = |xx: usize, yy: usize| img.pixels[yy * img.size + xx];
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

fn jitter(img: &GrayImage, brightness: f32, contrast: f32) -> GrayImage {
    let mut out = img.clone();
    if brightness != 1.0 {
        for v in out.pixels.iter_mut() {
            *v *= brightness;
        }
    }
    if contrast != 1.0 {
        let mean = out.pixels.iter().sum::<f32>() / out.pixels.len() as f32;
        for v in out.pixels.iter_mut() {
            *v = (*v - mean) * contrast + mean;
        }
    }
    for v in out.pixels.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Swap the standalone words "left" and "right" on word-token boundaries;
/// substrings inside longer words (e.g. "leftward") are untouched.
pub fn swap_left_right(report: &str) -> String {
    let mut out = String::with_capacity(report.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if !word.is_empty() {
            match word.as_str() {
                "left" => out.push_str("right"),
                "right" => out.push_str("left"),
                other => out.push_str(other),
            }
            word.clear();
        }
    };
    for ch in report.chars() {
        if ch.is_alphabetic() {
            word.push(ch);
        } else {
            flush(&mut word, &mut out);
            out.push(ch);
        }
    }
    flush(&mut word, &mut out);
    out
}
