use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

/// Planar projective transform in pixel coordinates (`x` right, `y` down),
/// normalized so that `H[2,2] = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(Matrix3<f64>);

/// Exact `(cos, sin)` at multiples of 90°.
pub(crate) fn cos_sin_deg(theta: f64) -> (f64, f64) {
    let t = theta.rem_euclid(360.0);
    let q = t / 90.0;
    if (q - q.round()).abs() < 1e-12 {
        return match (q.round() as i64) % 4 {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        };
    }
    let (s, c) = t.to_radians().sin_cos();
    (c, s)
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let z = m[(2, 2)];
        if !z.is_finite() || z.abs() < 1e-12 {
            return Err(Error::Degenerate(format!("H[2,2] = {z}")));
        }
        let m = m / z;
        let det = m.determinant();
        if !det.is_finite() || det.abs() <= 1e-9 {
            return Err(Error::Degenerate(format!("determinant {det}")));
        }
        Ok(Self(m))
    }

    /// Row-major entries.
    pub fn from_rows(v: [f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(&v))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    /// Rotation by `theta` degrees about `(cx, cy)`: `H11 = cos θ`, `H21 = sin θ`.
    /// In the y-down frame a positive angle turns clockwise as displayed.
    pub fn rotation_about(theta: f64, cx: f64, cy: f64) -> Self {
        let (c, s) = cos_sin_deg(theta);
        let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self(Self::translation(cx, cy).0 * r * Self::translation(-cx, -cy).0)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn to_rows(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .0
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("singular matrix".into()))?;
        Self::new(inv)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::new(self.0 * other.0)
    }

    /// Map `(x, y)`; `None` when the point goes to infinity.
    pub fn project(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let p = self.0 * Vector3::new(x, y, 1.0);
        if p.z.abs() < 1e-12 {
            return None;
        }
        Some((p.x / p.z, p.y / p.z))
    }

    /// Nine whitespace-separated reals, row-major.
    pub fn parse_text(text: &str) -> Result<Self> {
        let v: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format {
                what: "homography",
                msg: e.to_string(),
            })?;
        let rows: [f64; 9] = v.try_into().map_err(|v: Vec<f64>| Error::Format {
            what: "homography",
            msg: format!("expected 9 values, got {}", v.len()),
        })?;
        Self::from_rows(rows)
    }

    /// Three lines of three values; parses back to the same matrix.
    pub fn to_text(&self) -> String {
        let r = self.to_rows();
        format!(
            "{:?} {:?} {:?}\n{:?} {:?} {:?}\n{:?} {:?} {:?}\n",
            r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]
        )
    }

    /// `θ_GT = atan2(H21, H11)` in `[0, 360)`.
    pub fn rotation_degrees(&self) -> Result<f64> {
        decompose_rotation(self)
    }
}

/// `atan2(H21, H11)` in degrees, mapped to `[0, 360)`.
pub fn decompose_rotation(h: &Homography) -> Result<f64> {
    let (h11, h21) = (h.0[(0, 0)], h.0[(1, 0)]);
    if h11 == 0.0 && h21 == 0.0 {
        return Err(Error::UndefinedRotation);
    }
    let t = h21.atan2(h11).to_degrees().rem_euclid(360.0);
    Ok(if t >= 360.0 { 0.0 } else { t })
}

/// Sampling ranges for random homographies.
#[derive(Clone, Debug, PartialEq)]
pub struct HomographyRanges {
    /// Rotation degrees, uniform in `[lo, hi)`.
    pub rotation: (f64, f64),
    /// Isotropic scale, log-uniform in `[lo, hi]`.
    pub scale: (f64, f64),
    /// Maximum translation as a fraction of the extent.
    pub translation: f64,
    /// Maximum magnitude of each perspective term (per pixel).
    pub perspective: f64,
}

impl Default for HomographyRanges {
    fn default() -> Self {
        Self {
            rotation: (0.0, 360.0),
            scale: (0.8, 1.25),
            translation: 0.1,
            perspective: 0.001,
        }
    }
}

impl HomographyRanges {
    pub fn zero() -> Self {
        Self {
            rotation: (0.0, 0.0),
            scale: (1.0, 1.0),
            translation: 0.0,
            perspective: 0.0,
        }
    }

    pub fn rotation_only() -> Self {
        Self {
            rotation: (0.0, 360.0),
            ..Self::zero()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation.0 <= self.rotation.1
            && self.scale.0 > 0.0
            && self.scale.0 <= self.scale.1
            && self.translation >= 0.0
            && self.perspective >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid homography ranges {self:?}")))
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Similarity plus perspective perturbation about the center of a
/// `width × height` frame.
pub fn sample_homography(rng: &mut impl Rng, ranges: &HomographyRanges, width: usize, height: usize) -> Result<Homography> {
    ranges.validate()?;
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    for _ in 0..32 {
        let theta = uniform(rng, ranges.rotation.0, ranges.rotation.1);
        let s = uniform(rng, ranges.scale.0.ln(), ranges.scale.1.ln()).exp();
        let t = ranges.translation;
        let tx = uniform(rng, -t, t) * width as f64;
        let ty = uniform(rng, -t, t) * height as f64;
        let p = ranges.perspective;
        let (p1, p2) = (uniform(rng, -p, p), uniform(rng, -p, p));
        let (c, sn) = cos_sin_deg(theta);
        let rs = Matrix3::new(s * c, -s * sn, 0.0, s * sn, s * c, 0.0, 0.0, 0.0, 1.0);
        let persp = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, p1, p2, 1.0);
        let m = Homography::translation(cx + tx, cy + ty).0 * rs * persp * Homography::translation(-cx, -cy).0;
        if let Ok(h) = Homography::new(m) {
            return Ok(h);
        }
    }
    Err(Error::Degenerate("no invertible sample in 32 draws".into()))
}
