use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::harris::{gaussian_kernel, separable};
use crate::gtensor::ScalarImage;

/// Jitter magnitudes; all zero means identity.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterConfig {
    /// Additive offset drawn from `[-b, b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]`, applied about mid-gray.
    pub contrast: f64,
    /// Upper bound of the Gaussian noise standard deviation.
    pub noise: f64,
    /// Upper bound of the blur sigma.
    pub blur: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            brightness: 0.1,
            contrast: 0.2,
            noise: 0.02,
            blur: 0.8,
        }
    }
}

impl JitterConfig {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            noise: 0.0,
            blur: 0.0,
        }
    }
}

/// `clamp(c · (v − 0.5) + 0.5 + b)`.
pub fn adjust(img: &ScalarImage, contrast: f64, brightness: f64) -> ScalarImage {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = ((contrast * (*v as f64 - 0.5) + 0.5 + brightness).clamp(0.0, 1.0)) as f32;
    }
    out
}

pub fn gaussian_blur(img: &ScalarImage, sigma: f64) -> ScalarImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let px: Vec<f64> = img.data().iter().map(|v| *v as f64).collect();
    let out = separable(&px, img.height(), img.width(), &k, &k);
    ScalarImage::new(img.height(), img.width(), out.into_iter().map(|v| v as f32).collect()).expect("same dims")
}

fn draw(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Blur, brightness/contrast, additive noise, clamp to `[0, 1]`.
pub fn photometric_jitter(img: &ScalarImage, rng: &mut impl Rng, cfg: &JitterConfig) -> ScalarImage {
    let sigma = draw(rng, 0.0, cfg.blur);
    let contrast = draw(rng, (1.0 - cfg.contrast).max(0.0), 1.0 + cfg.contrast);
    let brightness = draw(rng, -cfg.brightness, cfg.brightness);
    let std = draw(rng, 0.0, cfg.noise);
    let blurred = if sigma > 0.1 { gaussian_blur(img, sigma) } else { img.clone() };
    let mut out = adjust(&blurred, contrast, brightness);
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in out.data_mut() {
            *v = ((*v as f64 + normal.sample(rng)).clamp(0.0, 1.0)) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_magnitudes_are_identity() {
        let img = crate::datagen::texture::blobs(20, 20, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(photometric_jitter(&img, &mut rng, &JitterConfig::none()), img);
    }

    #[test]
    fn brightness_shift_on_gray() {
        let out = adjust(&ScalarImage::filled(3, 3, 0.5), 1.0, 0.1);
        assert!(out.data().iter().all(|v| (*v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn output_is_clamped() {
        let img = crate::datagen::texture::mixed(32, 32, 4);
        let cfg = JitterConfig {
            brightness: 0.8,
            contrast: 2.0,
            noise: 0.5,
            blur: 2.0,
        };
        for seed in 0..5 {
            let out = photometric_jitter(&img, &mut ChaCha8Rng::seed_from_u64(seed), &cfg);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
