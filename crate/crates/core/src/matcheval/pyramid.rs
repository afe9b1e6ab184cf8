use serde::Serialize;

use crate::eqnn::Backbone;
use crate::error::{Error, Result};
use crate::gtensor::{GroupTensor, ScalarImage};
use crate::invmap::{extract_descriptors, Descriptor, Extraction, Method, Orientation};

/// Image sides `max_side · factor^-k` down to `min_side`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalePyramidConfig {
    pub factor: f64,
    pub max_side: f64,
    pub min_side: f64,
}

impl Default for ScalePyramidConfig {
    fn default() -> Self {
        Self {
            factor: 2f64.powf(0.25),
            max_side: 1024.0,
            min_side: 256.0,
        }
    }
}

impl ScalePyramidConfig {
    /// One level whose longer side is `side`.
    pub fn single(side: usize) -> Self {
        Self {
            factor: 2.0,
            max_side: side as f64,
            min_side: side as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor > 1.0 && self.min_side >= 1.0 && self.max_side >= self.min_side {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid scale pyramid {self:?}")))
        }
    }

    /// Longer-side lengths, largest first.
    pub fn level_sides(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut side = self.max_side;
        while side >= self.min_side * (1.0 - 1e-9) {
            out.push(side);
            side /= self.factor;
        }
        out
    }

    /// Even `(height, width)` per level for an image, duplicates removed.
    pub fn level_dims(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let long = height.max(width) as f64;
        let even = |v: f64| ((v / 2.0).round() as usize * 2).max(8);
        let mut out: Vec<(usize, usize)> = Vec::new();
        for side in self.level_sides() {
            let s = side / long;
            let d = (even(height as f64 * s), even(width as f64 * s));
            if !out.contains(&d) {
                out.push(d);
            }
        }
        out
    }
}

/// Backbone features of one image at every pyramid level.
pub struct FeaturePyramid {
    height: usize,
    width: usize,
    levels: Vec<GroupTensor>,
}

impl FeaturePyramid {
    /// `None` runs the image at its own resolution.
    pub fn compute(model: &Backbone, img: &ScalarImage, cfg: Option<&ScalePyramidConfig>) -> Result<Self> {
        let (h, w) = (img.height(), img.width());
        let dims = match cfg {
            Some(c) => {
                c.validate()?;
                c.level_dims(h, w)
            }
            None => vec![(h, w)],
        };
        let levels = dims
            .into_iter()
            .map(|(lh, lw)| {
                if (lh, lw) == (h, w) {
                    model.forward(img)
                } else {
                    model.forward(&img.resize(lh, lw))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            height: h,
            width: w,
            levels,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[GroupTensor] {
        &self.levels
    }

    /// Descriptors pooled by elementwise max over levels, then re-normalized.
    /// A keypoint outside some levels uses the remaining ones. Candidate
    /// orientations only work on a single level, where the count per
    /// keypoint is well defined.
    pub fn extract(&self, keypoints: &[(f64, f64)], method: Method, orientation: &Orientation) -> Result<Extraction> {
        if self.levels.len() == 1 {
            return extract_descriptors(&self.levels[0], keypoints, method, orientation);
        }
        if method == Method::Align && matches!(orientation, Orientation::Candidates { .. }) {
            return Err(Error::Config("orientation candidates need a single-level pyramid".into()));
        }
        let mut pooled: Vec<Option<Descriptor>> = vec![None; keypoints.len()];
        for f in &self.levels {
            let d = f.dims();
            // feature maps are half the level size
            let (sy, sx) = ((2 * d.height) as f64 / self.height as f64, (2 * d.width) as f64 / self.width as f64);
            let scaled: Vec<(f64, f64)> = keypoints
                .iter()
                .map(|&(x, y)| ((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5))
                .collect();
            let ext = extract_descriptors(f, &scaled, method, orientation)?;
            for desc in ext.descriptors {
                let slot = &mut pooled[desc.keypoint as usize];
                match slot {
                    None => *slot = Some(desc),
                    Some(acc) => acc.data.iter_mut().zip(&desc.data).for_each(|(a, b)| *a = a.max(*b)),
                }
            }
        }
        let mut out = Extraction::default();
        // keypoints that produced nothing at any level count as out of bounds
        for p in pooled {
            match p {
                Some(mut d) => {
                    let n = d.data.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                    if n == 0.0 {
                        out.zero_vectors += 1;
                        continue;
                    }
                    d.data.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
                    out.descriptors.push(d);
                }
                None => out.out_of_bounds += 1,
            }
        }
        Ok(out)
    }
}

/// Scale-pyramid descriptors for keypoints given in original image coordinates.
pub fn pyramid_descriptors(
    model: &Backbone,
    img: &ScalarImage,
    keypoints: &[(f64, f64)],
    method: Method,
    orientation: &Orientation,
    cfg: &ScalePyramidConfig,
) -> Result<Extraction> {
    FeaturePyramid::compute(model, img, Some(cfg))?.extract(keypoints, method, orientation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::texture;
    use crate::eqnn::BackboneConfig;

    fn small_model() -> Backbone {
        Backbone::new(BackboneConfig {
            widths: vec![4, 8],
            strides: vec![2, 1],
            pyramid: vec![1, 2],
            ..BackboneConfig::desk()
        })
        .unwrap()
    }

    #[test]
    fn default_config_has_nine_levels() {
        let c = ScalePyramidConfig::default();
        // 1024 · 2^(-k/4) >= 256  <=>  k <= 8
        let sides = c.level_sides();
        assert_eq!(sides.len(), 9);
        assert!((sides[8] - 256.0).abs() < 1e-9);
        assert_eq!(ScalePyramidConfig::single(64).level_sides(), vec![64.0]);
        assert!(ScalePyramidConfig { factor: 1.0, ..c }.validate().is_err());
    }

    #[test]
    fn single_level_equals_plain_extraction() {
        let model = small_model();
        let img = texture::mixed(40, 40, 2);
        let kps = vec![(10.0, 12.0), (20.5, 30.0), (33.0, 7.0)];
        let plain = extract_descriptors(&model.forward(&img).unwrap(), &kps, Method::Align, &Orientation::Dominant).unwrap();
        let pyr = pyramid_descriptors(&model, &img, &kps, Method::Align, &Orientation::Dominant, &ScalePyramidConfig::single(40)).unwrap();
        assert_eq!(plain, pyr);
    }

    #[test]
    fn duplicated_levels_do_not_change_the_output() {
        let model = small_model();
        let img = texture::mixed(48, 48, 5);
        let kps = vec![(12.0, 12.0), (24.0, 30.0)];
        let cfg = ScalePyramidConfig { factor: 1.5, max_side: 48.0, min_side: 21.0 };
        let a = pyramid_descriptors(&model, &img, &kps, Method::Max, &Orientation::Dominant, &cfg).unwrap();
        // a factor barely above 1 lists each rounded size many times
        let dense = ScalePyramidConfig { factor: 1.0001, max_side: 48.0, min_side: 47.99 };
        assert_eq!(dense.level_dims(48, 48), vec![(48, 48)]);
        let mut doubled = FeaturePyramid::compute(&model, &img, Some(&cfg)).unwrap();
        let copy = doubled.levels.clone();
        doubled.levels.extend(copy);
        assert_eq!(doubled.extract(&kps, Method::Max, &Orientation::Dominant).unwrap(), a);
    }

    #[test]
    fn pooled_descriptor_is_the_normalized_levelwise_max() {
        let model = small_model();
        let img = texture::mixed(48, 48, 9);
        let kps = vec![(16.0, 20.0), (30.0, 26.0)];
        let cfg = ScalePyramidConfig { factor: 1.5, max_side: 48.0, min_side: 21.0 };
        let fp = FeaturePyramid::compute(&model, &img, Some(&cfg)).unwrap();
        assert_eq!(fp.num_levels(), 3);
        let pooled = fp.extract(&kps, Method::Avg, &Orientation::Dominant).unwrap();
        // each level resized and run on its own
        let mut oracle: Vec<Vec<f32>> = vec![vec![f32::NEG_INFINITY; model.config().channels()]; kps.len()];
        for (lh, lw) in cfg.level_dims(48, 48) {
            let f = model.forward(&img.resize(lh, lw)).unwrap();
            let s = lh as f64 / 48.0;
            for (k, &(x, y)) in kps.iter().enumerate() {
                let kf = crate::invmap::keypoint_feature(&f, (x + 0.5) * s - 0.5, (y + 0.5) * s - 0.5, k as u32).unwrap();
                let d = crate::invmap::group_pool(&kf, Method::Avg).unwrap();
                oracle[k].iter_mut().zip(&d.data).for_each(|(a, b)| *a = a.max(*b));
            }
        }
        for (p, o) in pooled.descriptors.iter().zip(&oracle) {
            let n = o.iter().map(|v| v * v).sum::<f32>().sqrt();
            for (a, b) in p.data.iter().zip(o) {
                assert!((a - b / n).abs() < 1e-5);
            }
        }
    }
}
