//! Training-time image augmentation: random rescale, random crop (both
//! resampled bilinearly back to the input size), color jitter and random
//! grayscale.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::ImageTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub resize: bool,
    pub crop: bool,
    pub color_jitter: bool,
    pub grayscale: bool,
    /// Zoom factor range applied by `resize`.
    pub resize_range: (f64, f64),
    /// Area fraction range of the random crop.
    pub crop_scale: (f64, f64),
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            resize: true,
            crop: true,
            color_jitter: true,
            grayscale: true,
            resize_range: (0.9, 1.1),
            crop_scale: (0.8, 1.0),
            jitter_strength: 0.2,
            grayscale_prob: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            resize: false,
            crop: false,
            color_jitter: false,
            grayscale: false,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        !(self.resize || self.crop || self.color_jitter || self.grayscale)
    }

    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.resize_range;
        let (c0, c1) = self.crop_scale;
        if !(r0 > 0.0 && r0 <= r1) || !(c0 > 0.0 && c0 <= c1 && c1 <= 1.0) {
            return Err(Error::Config("augmentation ranges must be positive and ordered".into()));
        }
        if !(0.0..1.0).contains(&self.jitter_strength) || !(0.0..=1.0).contains(&self.grayscale_prob) {
            return Err(Error::Config("jitter_strength must lie in [0, 1) and grayscale_prob in [0, 1]".into()));
        }
        Ok(())
    }
}

fn bilinear(src: &Array3<f32>, x: f64, y: f64, c: usize) -> f32 {
    let (h, w, _) = src.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let at = |yy: f64, xx: f64| -> f32 {
        if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
            0.0
        } else {
            src[[yy as usize, xx as usize, c]]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Augments `img` with randomness drawn only from `seed`.
pub fn augment(img: &ImageTensor, config: &AugmentConfig, seed: u64) -> ImageTensor {
    if config.is_identity() {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = img.size();
    let s = size as f64;
    let mut px = img.pixels().clone();

    if config.resize || config.crop {
        // output pixel u samples input at origin + u * scale
        let mut scale = 1.0;
        if config.resize {
            scale /= rng.gen_range(config.resize_range.0..=config.resize_range.1);
        }
        let mut origin = (0.5 * s * (1.0 - scale), 0.5 * s * (1.0 - scale));
        if config.crop {
            let side = rng.gen_range(config.crop_scale.0..=config.crop_scale.1).sqrt();
            let extent = s * scale * side;
            let slack = s * scale - extent;
            origin.0 += slack * rng.gen::<f64>();
            origin.1 += slack * rng.gen::<f64>();
            scale *= side;
        }
        let src = px.clone();
        for ((y, x, c), v) in px.indexed_iter_mut() {
            let sx = origin.0 + (x as f64 + 0.5) * scale - 0.5;
            let sy = origin.1 + (y as f64 + 0.5) * scale - 0.5;
            *v = bilinear(&src, sx, sy, c);
        }
    }

    if config.color_jitter {
        let j = config.jitter_strength;
        let brightness = rng.gen_range(1.0 - j..=1.0 + j) as f32;
        let contrast = rng.gen_range(1.0 - j..=1.0 + j) as f32;
        let saturation = rng.gen_range(1.0 - j..=1.0 + j) as f32;
        px.mapv_inplace(|v| v * brightness);
        let mean = px.mean().unwrap_or(0.0);
        px.mapv_inplace(|v| (v - mean) * contrast + mean);
        for mut pixel in px.rows_mut() {
            let gray = 0.299 * pixel[0] + 0.587 * pixel[1] + 0.114 * pixel[2];
            pixel.mapv_inplace(|v| gray + (v - gray) * saturation);
        }
        px.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    if config.grayscale && rng.gen_bool(config.grayscale_prob) {
        for mut pixel in px.rows_mut() {
            let gray = 0.299 * pixel[0] + 0.587 * pixel[1] + 0.114 * pixel[2];
            pixel.fill(gray);
        }
    }

    px.mapv_inplace(|v| v.clamp(0.0, 1.0));
    ImageTensor::new(px).expect("augmentation keeps shape and range")
}
