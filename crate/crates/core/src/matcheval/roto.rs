use crate::datagen::{warp_image, Homography, Mask};
use crate::error::{Error, Result};
use crate::gtensor::ScalarImage;

/// 0°, 10°, …, 350°.
pub fn roto_angles() -> Vec<f64> {
    (0..36).map(|k| k as f64 * 10.0).collect()
}

#[derive(Clone, Debug)]
pub struct RotoPair {
    /// Index into [`RotoBenchmark::sources`].
    pub source: usize,
    pub angle: f64,
    pub h: Homography,
    pub target: ScalarImage,
    pub mask: Mask,
}

#[derive(Clone, Debug)]
pub struct RotoBenchmark {
    pub sources: Vec<ScalarImage>,
    pub angles: Vec<f64>,
    /// Source-major: all angles of source 0, then source 1, …
    pub pairs: Vec<RotoPair>,
}

impl RotoBenchmark {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Rotate every image about its center by every angle.
pub fn build_roto_benchmark(images: Vec<ScalarImage>, angles: &[f64]) -> Result<RotoBenchmark> {
    if images.is_empty() {
        return Err(Error::Config("rotation benchmark needs at least one image".into()));
    }
    let mut pairs = Vec::with_capacity(images.len() * angles.len());
    for (i, img) in images.iter().enumerate() {
        let (cx, cy) = ((img.width() as f64 - 1.0) / 2.0, (img.height() as f64 - 1.0) / 2.0);
        for &angle in angles {
            let h = Homography::rotation_about(angle, cx, cy);
            let (target, mask) = warp_image(img, &h)?;
            pairs.push(RotoPair {
                source: i,
                angle,
                h,
                target,
                mask,
            });
        }
    }
    Ok(RotoBenchmark {
        sources: images,
        angles: angles.to_vec(),
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::texture;

    #[test]
    fn sizes() {
        let one = build_roto_benchmark(vec![texture::mixed(16, 16, 0)], &roto_angles()).unwrap();
        assert_eq!(one.len(), 36);
        let ten: Vec<ScalarImage> = (0..10).map(|s| texture::mixed(16, 16, s)).collect();
        assert_eq!(build_roto_benchmark(ten, &roto_angles()).unwrap().len(), 360);
        assert!(build_roto_benchmark(Vec::new(), &roto_angles()).is_err());
    }

    #[test]
    fn zero_is_identity_and_ninety_is_lossless() {
        let img = texture::mixed(24, 24, 4);
        let b = build_roto_benchmark(vec![img.clone()], &[0.0, 90.0]).unwrap();
        assert_eq!(b.pairs[0].target, img);
        assert_eq!(b.pairs[0].mask.count(), 24 * 24);
        // positive angles turn clockwise on screen, three counter-clockwise quarters
        assert_eq!(b.pairs[1].target, img.rotate_quarter(3).unwrap());
        assert_eq!(b.pairs[1].mask.count(), 24 * 24);
    }
}
