//! Procedural grayscale textures so tests and demos need no external data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gtensor::ScalarImage;

/// Checkerboard with square cells of `cell` pixels, rotated by `angle` degrees.
pub fn checkerboard(height: usize, width: usize, cell: f64, angle: f64) -> ScalarImage {
    let (s, c) = angle.to_radians().sin_cos();
    ScalarImage::from_fn(height, width, |y, x| {
        let mut acc = 0.0;
        for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
            let (px, py) = (x as f64 + ox, y as f64 + oy);
            let u = (c * px + s * py) / cell;
            let v = (-s * px + c * py) / cell;
            if (u.floor() as i64 + v.floor() as i64).rem_euclid(2) == 0 {
                acc += 0.25;
            }
        }
        0.1 + 0.8 * acc as f32
    })
}

/// Linear ramp from 0 to 1 along direction `angle` degrees.
pub fn gradient(height: usize, width: usize, angle: f64) -> ScalarImage {
    let (s, c) = angle.to_radians().sin_cos();
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let half = (cx * cx + cy * cy).sqrt().max(1.0);
    ScalarImage::from_fn(height, width, |y, x| {
        let t = (c * (x as f64 - cx) + s * (y as f64 - cy)) / half;
        (0.5 + 0.5 * t).clamp(0.0, 1.0) as f32
    })
}

/// Sum of random anisotropic Gaussian blobs, rescaled to `[0, 1]`.
pub fn blobs(height: usize, width: usize, seed: u64) -> ScalarImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 6 + (height * width) / 150;
    let extent = height.min(width) as f64;
    let blobs: Vec<(f64, f64, f64, f64, f64, f64)> = (0..n)
        .map(|_| {
            (
                rng.random_range(0.0..width as f64),
                rng.random_range(0.0..height as f64),
                rng.random_range(0.03..0.12) * extent,
                rng.random_range(0.03..0.12) * extent,
                rng.random_range(0.0..std::f64::consts::PI),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let raw: Vec<f64> = (0..height * width)
        .map(|i| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            blobs
                .iter()
                .map(|&(bx, by, sx, sy, th, a)| {
                    let (s, c) = th.sin_cos();
                    let (dx, dy) = (x - bx, y - by);
                    let u = (c * dx + s * dy) / sx;
                    let v = (-s * dx + c * dy) / sy;
                    a * (-0.5 * (u * u + v * v)).exp()
                })
                .sum()
        })
        .collect();
    rescale(raw, height, width)
}

fn rescale(raw: Vec<f64>, height: usize, width: usize) -> ScalarImage {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    ScalarImage::new(height, width, raw.into_iter().map(|v| ((v - lo) / span) as f32).collect())
        .expect("dims match")
}

enum Shape {
    /// Rotated rectangle: center, half extents, angle.
    Rect(f64, f64, f64, f64, f64),
    /// Triangle vertices.
    Tri([(f64, f64); 3]),
    /// Ellipse: center, radii, angle.
    Ellipse(f64, f64, f64, f64, f64),
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect(cx, cy, hw, hh, th) | Shape::Ellipse(cx, cy, hw, hh, th) => {
                let (s, c) = th.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = (c * dx + s * dy) / hw;
                let v = (-s * dx + c * dy) / hh;
                if matches!(self, Shape::Rect(..)) {
                    u.abs() <= 1.0 && v.abs() <= 1.0
                } else {
                    u * u + v * v <= 1.0
                }
            }
            Shape::Tri(p) => {
                let cross = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let d = [cross(p[0], p[1]), cross(p[1], p[2]), cross(p[2], p[0])];
                d.iter().all(|v| *v >= 0.0) || d.iter().all(|v| *v <= 0.0)
            }
        }
    }
}

/// Smooth background, blobs and antialiased polygons of random gray levels.
/// Rich in asymmetric corners, which both the detector and the orientation
/// histograms need.
pub fn mixed(height: usize, width: usize, seed: u64) -> ScalarImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let base = blobs(height, width, seed);
    let back = gradient(height, width, rng.random_range(0.0..360.0));
    let mut img: Vec<f64> = base
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| 0.15 + 0.35 * *a as f64 + 0.2 * *b as f64)
        .collect();
    let n = 4 + (height * width) / 80;
    for _ in 0..n {
        let (cx, cy) = (rng.random_range(0.0..width as f64), rng.random_range(0.0..height as f64));
        let size = rng.random_range(3.0..12.0);
        let th = rng.random_range(0.0..std::f64::consts::TAU);
        let shape = match rng.random_range(0..3) {
            0 => Shape::Rect(cx, cy, size, size * rng.random_range(0.3..1.0), th),
            1 => {
                let mut p = [(0.0, 0.0); 3];
                for v in &mut p {
                    let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = size * rng.random_range(0.6..1.6);
                    *v = (cx + r * a.cos(), cy + r * a.sin());
                }
                Shape::Tri(p)
            }
            _ => Shape::Ellipse(cx, cy, size, size * rng.random_range(0.3..0.9), th),
        };
        let level = rng.random_range(0.0..1.0);
        let alpha = rng.random_range(0.6..1.0);
        let r = (size * 1.7).ceil() as i64 + 2;
        let (x0, x1) = ((cx as i64 - r).max(0), (cx as i64 + r).min(width as i64 - 1));
        let (y0, y1) = ((cy as i64 - r).max(0), (cy as i64 + r).min(height as i64 - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let mut cov = 0.0;
                for (oy, ox) in [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] {
                    if shape.contains(x as f64 + ox, y as f64 + oy) {
                        cov += 0.25;
                    }
                }
                if cov > 0.0 {
                    let i = y as usize * width + x as usize;
                    let a = alpha * cov;
                    img[i] = (1.0 - a) * img[i] + a * level;
                }
            }
        }
    }
    ScalarImage::new(height, width, img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())
        .expect("dims match")
}

/// The named textures used by the CLI and examples.
pub fn by_name(name: &str, height: usize, width: usize, seed: u64) -> Option<ScalarImage> {
    Some(match name {
        "checkerboard" => checkerboard(height, width, 8.0 + (seed % 5) as f64, (seed * 17 % 90) as f64),
        "gradient" => gradient(height, width, (seed * 37 % 360) as f64),
        "blobs" => blobs(height, width, seed),
        "mixed" => mixed(height, width, seed),
        _ => return None,
    })
}
