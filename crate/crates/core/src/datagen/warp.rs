use super::Homography;
use crate::error::Result;
use crate::gtensor::ScalarImage;

/// Boolean validity map over a warped image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    /// True when all four bilinear neighbors of `(x, y)` are valid.
    pub fn covers(&self, x: f64, y: f64) -> bool {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64) {
            return false;
        }
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = (x.ceil() as usize, y.ceil() as usize);
        self.get(y0, x0) && self.get(y0, x1) && self.get(y1, x0) && self.get(y1, x1)
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }
}

/// Inverse-mapped bilinear warp: `out(q) = img(H⁻¹ q)`, same extent as `img`.
pub fn warp_image(img: &ScalarImage, h: &Homography) -> Result<(ScalarImage, Mask)> {
    warp_from(img, (0.0, 0.0), h, img.height(), img.width())
}

/// Warp a window of a larger image: `out(q) = img(origin + H⁻¹ q)` for an
/// `height × width` output, so content outside the window fills the borders.
pub fn warp_from(
    img: &ScalarImage,
    origin: (f64, f64),
    h: &Homography,
    height: usize,
    width: usize,
) -> Result<(ScalarImage, Mask)> {
    let inv = h.inverse()?;
    let mut valid = Vec::with_capacity(height * width);
    let out = ScalarImage::from_fn(height, width, |y, x| {
        let v = inv
            .project(x as f64, y as f64)
            .and_then(|(sx, sy)| img.sample(sy + origin.1, sx + origin.0));
        valid.push(v.is_some());
        v.unwrap_or(0.0)
    });
    Ok((
        out,
        Mask {
            height,
            width,
            data: valid,
        },
    ))
}

/// Peak signal-to-noise ratio (dB) over the pixels where `mask` holds.
pub fn psnr(a: &ScalarImage, b: &ScalarImage, mask: &Mask) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if mask.get(y, x) {
                let d = (a.get(y, x) - b.get(y, x)) as f64;
                se += d * d;
                n += 1;
            }
        }
    }
    if n == 0 || se == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (1.0 / (se / n as f64)).log10()
}
