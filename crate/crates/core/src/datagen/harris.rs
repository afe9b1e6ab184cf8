use super::warp::Mask;
use crate::error::{Error, Result};
use crate::gtensor::ScalarImage;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub response: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarrisParams {
    /// Gaussian window of the structure tensor.
    pub sigma: f64,
    pub k: f64,
    pub nms_radius: usize,
    pub margin: usize,
    /// Responses below `rel_threshold · max` are dropped.
    pub rel_threshold: f64,
}

impl Default for HarrisParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            k: 0.04,
            nms_radius: 4,
            margin: 8,
            rel_threshold: 1e-3,
        }
    }
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable correlation with replicated borders.
pub(crate) fn separable(data: &[f64], h: usize, w: usize, kx: &[f64], ky: &[f64]) -> Vec<f64> {
    let rx = (kx.len() / 2) as i64;
    let ry = (ky.len() / 2) as i64;
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kx
                .iter()
                .enumerate()
                .map(|(i, c)| c * data[y * w + clampi(x as i64 + i as i64 - rx, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = ky
                .iter()
                .enumerate()
                .map(|(i, c)| c * tmp[clampi(y as i64 + i as i64 - ry, h) * w + x])
                .sum();
        }
    }
    out
}

/// Harris corner response map (Sobel gradients, Gaussian-weighted structure tensor).
pub fn harris_response(img: &ScalarImage, params: &HarrisParams) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let px: Vec<f64> = img.data().iter().map(|v| *v as f64).collect();
    let ix = separable(&px, h, w, &[-0.5, 0.0, 0.5], &[0.25, 0.5, 0.25]);
    let iy = separable(&px, h, w, &[0.25, 0.5, 0.25], &[-0.5, 0.0, 0.5]);
    let g = gaussian_kernel(params.sigma);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let sxx = separable(&prod(&ix, &ix), h, w, &g, &g);
    let syy = separable(&prod(&iy, &iy), h, w, &g, &g);
    let sxy = separable(&prod(&ix, &iy), h, w, &g, &g);
    (0..h * w)
        .map(|i| {
            let tr = sxx[i] + syy[i];
            sxx[i] * syy[i] - sxy[i] * sxy[i] - params.k * tr * tr
        })
        .collect()
}

/// Up to `limit` keypoints by descending response; ties resolve in raster
/// order. Points outside `mask` (when given) are skipped.
pub fn detect_harris(img: &ScalarImage, limit: usize, params: &HarrisParams, mask: Option<&Mask>) -> Vec<Keypoint> {
    let (h, w) = (img.height(), img.width());
    let m = params.margin;
    if h <= 2 * m || w <= 2 * m {
        return Vec::new();
    }
    let r = harris_response(img, params);
    let max = r.iter().copied().fold(0.0, f64::max);
    let threshold = (params.rel_threshold * max).max(1e-12);
    let rad = params.nms_radius as i64;
    let mut out = Vec::new();
    for y in m..h - m {
        for x in m..w - m {
            let v = r[y * w + x];
            if v <= threshold || mask.is_some_and(|mk| !mk.get(y, x)) {
                continue;
            }
            let mut peak = true;
            'win: for dy in -rad..=rad {
                for dx in -rad..=rad {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if (dy, dx) == (0, 0) || yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let u = r[yy as usize * w + xx as usize];
                    // earlier raster neighbors win ties
                    let earlier = (dy, dx) < (0, 0);
                    if u > v || (earlier && u == v) {
                        peak = false;
                        break 'win;
                    }
                }
            }
            if peak {
                out.push(Keypoint {
                    x: x as f64,
                    y: y as f64,
                    response: v,
                });
            }
        }
    }
    out.sort_by(|a, b| b.response.total_cmp(&a.response));
    out.truncate(limit);
    out
}

/// Exactly `k` keypoints or [`Error::TooFewKeypoints`].
pub fn harris_keypoints(img: &ScalarImage, k: usize, params: &HarrisParams) -> Result<Vec<Keypoint>> {
    let kps = detect_harris(img, k, params, None);
    if kps.len() < k {
        return Err(Error::TooFewKeypoints {
            found: kps.len(),
            required: k,
        });
    }
    Ok(kps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_corners() {
        let img = ScalarImage::filled(40, 40, 0.5);
        assert!(detect_harris(&img, 10, &HarrisParams::default(), None).is_empty());
        assert!(matches!(
            harris_keypoints(&img, 1, &HarrisParams::default()),
            Err(Error::TooFewKeypoints { found: 0, required: 1 })
        ));
    }

    #[test]
    fn square_corners_are_strongest() {
        let img = ScalarImage::from_fn(48, 48, |y, x| {
            if (16..32).contains(&y) && (16..32).contains(&x) {
                1.0
            } else {
                0.0
            }
        });
        let kps = harris_keypoints(&img, 4, &HarrisParams::default()).unwrap();
        let corners = [(15.5, 15.5), (31.5, 15.5), (15.5, 31.5), (31.5, 31.5)];
        for (cx, cy) in corners {
            assert!(
                kps.iter().any(|k| (k.x - cx).abs() <= 1.5 && (k.y - cy).abs() <= 1.5),
                "no keypoint near ({cx}, {cy}): {kps:?}"
            );
        }
    }

    #[test]
    fn deterministic_and_margin_respected() {
        let img = crate::datagen::texture::mixed(64, 64, 5);
        let p = HarrisParams::default();
        let a = detect_harris(&img, 100, &p, None);
        assert_eq!(a, detect_harris(&img, 100, &p, None));
        assert!(!a.is_empty());
        assert!(a.iter().all(|k| k.x >= 8.0 && k.y >= 8.0 && k.x < 56.0 && k.y < 56.0));
        assert!(a.windows(2).all(|w| w[0].response >= w[1].response));
    }
}
