//! Seeded image augmentation producing the two views of each image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Range of the crop area as a fraction of the image area.
    pub crop_scale: [f64; 2],
    /// Range of the crop aspect ratio (width / height).
    pub aspect_ratio: [f64; 2],
    pub flip_probability: f64,
    /// Maximum absolute additive intensity shift.
    pub intensity_jitter: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_scale: [0.75, 1.0],
            aspect_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_probability: 0.0,
            intensity_jitter: 0.1,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Configuration that returns every image unchanged.
    pub fn identity() -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            aspect_ratio: [1.0, 1.0],
            flip_probability: 0.0,
            intensity_jitter: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "augmentation.crop_scale must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
            )));
        }
        let [rlo, rhi] = self.aspect_ratio;
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return Err(Error::Config(format!(
                "augmentation.aspect_ratio must satisfy 0 < lo <= hi, got [{rlo}, {rhi}]"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("augmentation.flip_probability must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.intensity_jitter) {
            return Err(Error::Config("augmentation.intensity_jitter must lie in [0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("augmentation.noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Mirrors an image left to right.
pub fn hflip(image: &Image) -> Image {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let mut out = Vec::with_capacity(image.pixels().len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend((0..c).map(|ch| image.get(y, x, ch)));
        }
    }
    Image::new(h, w, c, out).expect("flip preserves size and range")
}

/// Picks a crop window `(top, left, height, width)`; ten attempts at a
/// random area and ratio, then the largest centered window within the
/// ratio range.
fn crop_window(h: usize, w: usize, config: &AugmentationConfig, rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let [slo, shi] = config.crop_scale;
    let (llo, lhi) = (config.aspect_ratio[0].ln(), config.aspect_ratio[1].ln());
    for _ in 0..10 {
        let target = area * if slo < shi { rng.random_range(slo..=shi) } else { slo };
        let ratio = if llo < lhi { rng.random_range(llo..=lhi) } else { llo }.exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let ratio = w as f64 / h as f64;
    let (ch, cw) = if ratio < config.aspect_ratio[0] {
        ((w as f64 / config.aspect_ratio[0]).round() as usize, w)
    } else if ratio > config.aspect_ratio[1] {
        (h, (h as f64 * config.aspect_ratio[1]).round() as usize)
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Random resized crop, optional flip, intensity shift and Gaussian noise,
/// clamped to `[0, 1]`. Output size equals input size.
pub fn augment(image: &Image, config: &AugmentationConfig, rng: &mut impl Rng) -> Result<Image> {
    config.validate()?;
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let (top, left, ch, cw) = crop_window(h, w, config, rng);
    let mut out = if (top, left, ch, cw) == (0, 0, h, w) {
        image.clone()
    } else {
        image.resample_region(top as f64, left as f64, ch as f64, cw as f64, h, w)?
    };
    let flip = rng.random::<f64>() < config.flip_probability;
    if flip {
        out = hflip(&out);
    }
    let shift = if config.intensity_jitter > 0.0 {
        rng.random_range(-config.intensity_jitter..=config.intensity_jitter)
    } else {
        0.0
    };
    if shift == 0.0 && config.noise_sigma == 0.0 {
        return Ok(out);
    }
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let pixels = out
        .pixels()
        .iter()
        .map(|&v| {
            let n = if config.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            (v + shift + n).clamp(0.0, 1.0)
        })
        .collect();
    Image::new(h, w, c, pixels)
}

/// Random state for one view of one sample in one epoch.
pub fn view_rng(seed: u64, epoch: u64, sample: u64, view: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(sample.wrapping_mul(2).wrapping_add(view));
    rng
}

/// Stable 64-bit key of a record id (FNV-1a).
pub fn sample_key(id: &str) -> u64 {
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Both views of every image; `keys` identify the samples.
pub fn make_views(
    images: &[&Image],
    keys: &[u64],
    config: &AugmentationConfig,
    seed: u64,
    epoch: u64,
) -> Result<(Vec<Image>, Vec<Image>)> {
    if images.len() != keys.len() {
        return Err(Error::shape("make_views", &[images.len()], &[keys.len()]));
    }
    let seed = seed ^ config.seed.rotate_left(32);
    let pairs: Vec<(Image, Image)> = images
        .par_iter()
        .zip(keys.par_iter())
        .map(|(img, &k)| {
            let a = augment(img, config, &mut view_rng(seed, epoch, k, 0))?;
            let b = augment(img, config, &mut view_rng(seed, epoch, k, 1))?;
            Ok((a, b))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        let px = (0..64).map(|i| i as f64 / 63.0).collect();
        Image::new(8, 8, 1, px).unwrap()
    }

    #[test]
    fn null_config_is_identity() {
        let img = ramp();
        let mut rng = view_rng(1, 0, 0, 0);
        assert_eq!(augment(&img, &AugmentationConfig::identity(), &mut rng).unwrap(), img);
    }

    #[test]
    fn full_scale_with_ratio_range_is_identity() {
        let cfg = AugmentationConfig {
            crop_scale: [1.0, 1.0],
            intensity_jitter: 0.0,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let img = ramp();
        for s in 0..20 {
            assert_eq!(augment(&img, &cfg, &mut view_rng(s, 0, 0, 0)).unwrap(), img);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp();
        assert_eq!(hflip(&hflip(&img)), img);
        assert_ne!(hflip(&img), img);
    }

    #[test]
    fn rejects_crop_scale_above_one() {
        let cfg = AugmentationConfig {
            crop_scale: [0.5, 1.2],
            ..Default::default()
        };
        assert!(augment(&ramp(), &cfg, &mut view_rng(0, 0, 0, 0)).is_err());
    }
}
