use nalgebra::{DMatrix, Matrix3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::matching::Match;
use crate::datagen::Homography;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier reprojection radius in pixels.
    pub threshold: f64,
    /// Mean corner error accepted by HEstimation.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            threshold: 3.0,
            epsilon: 3.0,
            seed: 0,
        }
    }
}

/// Similarity that moves the centroid to the origin and the mean distance to √2.
fn normalizer(pts: &[(f64, f64)]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0 / n, b + p.1 / n));
    let mean = pts.iter().map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean > 1e-12 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

fn apply(t: &Matrix3<f64>, p: (f64, f64)) -> (f64, f64) {
    let v = t * nalgebra::Vector3::new(p.0, p.1, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// Normalized direct linear transform mapping `src[i]` to `dst[i]` (n ≥ 4).
pub fn fit_homography(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Homography> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(Error::TooFewMatches { found: n.min(dst.len()) });
    }
    let (ts, td) = (normalizer(src), normalizer(dst));
    // padded to at least 9 rows so the SVD yields the full right null space
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let (x, y) = apply(&ts, src[i]);
        let (u, v) = apply(&td, dst[i]);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for k in 0..9 {
            a[(2 * i, k)] = r0[k];
            a[(2 * i + 1, k)] = r1[k];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let k = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| i)
        .expect("nine singular values");
    let h = Matrix3::from_row_slice(&vt.row(k).iter().copied().collect::<Vec<_>>());
    let inv_td = td.try_inverse().expect("similarity is invertible");
    Homography::new(inv_td * h * ts)
}

/// Whether any three of four points are (nearly) collinear.
fn degenerate(p: &[(f64, f64)]) -> bool {
    let area = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| ((b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)).abs();
    [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
        .iter()
        .any(|&(i, j, k)| area(p[i], p[j], p[k]) < 1e-6)
}

fn transfer_errors(h: &Homography, src: &[(f64, f64)], dst: &[(f64, f64)]) -> Vec<f64> {
    src.iter()
        .zip(dst)
        .map(|(s, d)| match h.project(s.0, s.1) {
            Some((x, y)) => ((x - d.0).powi(2) + (y - d.1).powi(2)).sqrt(),
            None => f64::INFINITY,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacFit {
    pub h: Homography,
    /// Inlier flags after the refit.
    pub inliers: Vec<bool>,
}

impl RansacFit {
    pub fn num_inliers(&self) -> usize {
        self.inliers.iter().filter(|v| **v).count()
    }
}

/// Refit on the inliers of `h` and keep the refit when it does not lose support.
fn refine(h: Homography, src: &[(f64, f64)], dst: &[(f64, f64)], threshold: f64) -> RansacFit {
    let flags = |h: &Homography| -> Vec<bool> { transfer_errors(h, src, dst).iter().map(|e| *e <= threshold).collect() };
    let inl = flags(&h);
    let pick = |f: &[bool], v: &[(f64, f64)]| -> Vec<(f64, f64)> { v.iter().zip(f).filter(|p| *p.1).map(|p| *p.0).collect() };
    let count = |f: &[bool]| f.iter().filter(|v| **v).count();
    if let Ok(r) = fit_homography(&pick(&inl, src), &pick(&inl, dst)) {
        let rf = flags(&r);
        if count(&rf) >= count(&inl) {
            return RansacFit { h: r, inliers: rf };
        }
    }
    RansacFit { h, inliers: inl }
}

/// Best-support minimal-sample homography, refit on its inliers.
pub fn ransac_homography(src: &[(f64, f64)], dst: &[(f64, f64)], cfg: &RansacConfig) -> Result<RansacFit> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(Error::TooFewMatches { found: n.min(dst.len()) });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // (support, summed inlier error, model); ties on support go to the tighter fit
    let mut best: Option<(usize, f64, Homography)> = None;
    for _ in 0..cfg.iterations {
        let idx = sample(&mut rng, n, 4).into_vec();
        let s: Vec<(f64, f64)> = idx.iter().map(|&i| src[i]).collect();
        let d: Vec<(f64, f64)> = idx.iter().map(|&i| dst[i]).collect();
        if degenerate(&s) || degenerate(&d) {
            continue;
        }
        let Ok(h) = fit_homography(&s, &d) else { continue };
        let errs = transfer_errors(&h, src, dst);
        let inl = errs.iter().filter(|e| **e <= cfg.threshold);
        let (support, resid) = (inl.clone().count(), inl.sum::<f64>());
        if best.as_ref().is_none_or(|b| support > b.0 || (support == b.0 && resid < b.1)) {
            best = Some((support, resid, h));
        }
    }
    let (_, _, h) = best.ok_or_else(|| Error::Degenerate("no non-degenerate minimal sample".into()))?;
    Ok(refine(h, src, dst, cfg.threshold))
}

/// Mean distance between the four image corners mapped by `a` and by `b`.
pub fn corner_error(a: &Homography, b: &Homography, width: usize, height: usize) -> f64 {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    corners
        .iter()
        .map(|&(x, y)| match (a.project(x, y), b.project(x, y)) {
            (Some(p), Some(q)) => ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt(),
            _ => f64::INFINITY,
        })
        .sum::<f64>()
        / 4.0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HEstimation {
    pub pass: bool,
    /// `None` when no homography could be fitted.
    pub corner_error: Option<f64>,
    pub inliers: usize,
}

/// Fit `Ĥ` from the matches by RANSAC and compare corners against `h_gt`.
/// Fewer than four usable matches counts as a failure.
pub fn hestimation(
    matches: &[Match],
    kp_a: &[(f64, f64)],
    kp_b: &[(f64, f64)],
    h_gt: &Homography,
    width: usize,
    height: usize,
    cfg: &RansacConfig,
) -> HEstimation {
    let (src, dst): (Vec<_>, Vec<_>) = matches
        .iter()
        .filter_map(|m| Some((*kp_a.get(m.a as usize)?, *kp_b.get(m.b as usize)?)))
        .unzip();
    match ransac_homography(&src, &dst, cfg) {
        Ok(fit) => {
            let err = corner_error(&fit.h, h_gt, width, height);
            HEstimation {
                pass: err <= cfg.epsilon,
                corner_error: Some(err),
                inliers: fit.num_inliers(),
            }
        }
        Err(_) => HEstimation {
            pass: false,
            corner_error: None,
            inliers: 0,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn synthetic_h() -> Homography {
        Homography::from_rows([0.9, -0.3, 12.0, 0.25, 1.05, -4.0, 4e-4, -2e-4, 1.0]).unwrap()
    }

    fn points(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)))
            .collect()
    }

    fn project_all(h: &Homography, p: &[(f64, f64)]) -> Vec<(f64, f64)> {
        p.iter().map(|q| h.project(q.0, q.1).unwrap()).collect()
    }

    fn as_matches(n: usize) -> Vec<Match> {
        (0..n as u32).map(|i| Match { a: i, b: i, similarity: 1.0 }).collect()
    }

    #[test]
    fn dlt_recovers_exact_homography() {
        let h = synthetic_h();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = points(&mut rng, 4);
        let fit = fit_homography(&src, &project_all(&h, &src)).unwrap();
        assert!(corner_error(&fit, &h, 100, 100) < 1e-6);
    }

    #[test]
    fn noiseless_matches_pass() {
        let h = synthetic_h();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4 + seed as usize;
            let src = points(&mut rng, n);
            let r = hestimation(&as_matches(n), &src, &project_all(&h, &src), &h, 100, 100, &RansacConfig::default());
            assert!(r.pass && r.corner_error.unwrap() < 1e-6, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn fewer_than_four_matches_fail() {
        let h = synthetic_h();
        let src = vec![(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)];
        let r = hestimation(&as_matches(3), &src, &project_all(&h, &src), &h, 100, 100, &RansacConfig::default());
        assert!(!r.pass && r.corner_error.is_none());
    }

    /// Every 4-subset of the matches, best support, same refit.
    fn exhaustive(src: &[(f64, f64)], dst: &[(f64, f64)], threshold: f64) -> RansacFit {
        let n = src.len();
        let mut best: Option<(usize, Homography)> = None;
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    for l in k + 1..n {
                        let s = [src[i], src[j], src[k], src[l]];
                        let d = [dst[i], dst[j], dst[k], dst[l]];
                        if degenerate(&s) || degenerate(&d) {
                            continue;
                        }
                        let Ok(h) = fit_homography(&s, &d) else { continue };
                        let c = transfer_errors(&h, src, dst).iter().filter(|e| **e <= threshold).count();
                        if best.as_ref().is_none_or(|b| c > b.0) {
                            best = Some((c, h));
                        }
                    }
                }
            }
        }
        refine(best.unwrap().1, src, dst, threshold)
    }

    #[test]
    fn sixty_percent_inliers_match_the_exhaustive_oracle() {
        let h = synthetic_h();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let src = points(&mut rng, 12);
            let mut dst = project_all(&h, &src);
            // 5 of 12 replaced by uniform outliers
            for d in dst.iter_mut().skip(7) {
                *d = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
            }
            let cfg = RansacConfig { seed, ..Default::default() };
            let fit = ransac_homography(&src, &dst, &cfg).unwrap();
            let oracle = exhaustive(&src, &dst, cfg.threshold);
            assert_eq!(fit.num_inliers(), oracle.num_inliers(), "seed {seed}");
            assert!(fit.inliers[..7].iter().all(|v| *v));
            let r = hestimation(&as_matches(12), &src, &dst, &h, 100, 100, &cfg);
            assert!(r.pass, "seed {seed}: {r:?}");
            assert!(corner_error(&oracle.h, &h, 100, 100) <= cfg.epsilon);
        }
    }
}
