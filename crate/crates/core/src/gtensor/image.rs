use super::rotate_planes_quarter;
use crate::error::{Error, Result};

/// Single-channel luminance image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ScalarImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "image {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        assert!(height > 0 && width > 0);
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(height > 0 && width > 0);
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear lookup; `None` outside `[0, h-1] × [0, w-1]`.
    pub fn sample(&self, y: f64, x: f64) -> Option<f32> {
        let (h, w) = (self.height as f64, self.width as f64);
        if !(y >= 0.0 && x >= 0.0 && y <= h - 1.0 && x <= w - 1.0) {
            return None;
        }
        let (y0, y1, fy) = super::lerp_index(y, self.height);
        let (x0, x1, fx) = super::lerp_index(x, self.width);
        let v = (1.0 - fy) * ((1.0 - fx) * self.get(y0, x0) as f64 + fx * self.get(y0, x1) as f64)
            + fy * ((1.0 - fx) * self.get(y1, x0) as f64 + fx * self.get(y1, x1) as f64);
        Some(v as f32)
    }

    /// Rectangular sub-image; panics when the window leaves the image.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> ScalarImage {
        assert!(y0 + height <= self.height && x0 + width <= self.width);
        Self::from_fn(height, width, |y, x| self.get(y0 + y, x0 + x))
    }

    /// Counter-clockwise quarter turns (row 0 on top).
    pub fn rotate_quarter(&self, q: i64) -> Result<ScalarImage> {
        if self.height != self.width {
            return Err(Error::NonSquare {
                h: self.height,
                w: self.width,
            });
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            data: rotate_planes_quarter(&self.data, self.width, q),
        })
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, height: usize, width: usize) -> ScalarImage {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Self::from_fn(height, width, |y, x| {
            let yy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let xx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            self.sample(yy, xx).unwrap_or(0.0)
        })
    }
}
