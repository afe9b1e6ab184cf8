use super::{lerp_index, rotate_planes_quarter, shift_group_axis, Tensor};
use crate::error::{Error, Result};

/// Extents of a regular-representation feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroupDims {
    pub channels: usize,
    pub order: usize,
    pub height: usize,
    pub width: usize,
}

impl GroupDims {
    pub fn new(channels: usize, order: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || order == 0 || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "all GroupTensor dims must be >= 1, got ({channels}, {order}, {height}, {width})"
            )));
        }
        Ok(Self {
            channels,
            order,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.channels * self.order * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, g: usize, y: usize, x: usize) -> usize {
        ((c * self.order + g) * self.height + y) * self.width + x
    }
}

/// Feature map `F ∈ R^{C×|G|×H×W}` stored channel-major, then group, rows, cols.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupTensor {
    dims: GroupDims,
    data: Vec<f32>,
}

impl GroupTensor {
    pub fn new(dims: GroupDims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "{dims:?} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: GroupDims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn from_fn(dims: GroupDims, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for c in 0..dims.channels {
            for g in 0..dims.order {
                for y in 0..dims.height {
                    for x in 0..dims.width {
                        data.push(f(c, g, y, x));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> GroupDims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Panics when any index is out of range.
    pub fn get(&self, c: usize, g: usize, y: usize, x: usize) -> f32 {
        let d = &self.dims;
        assert!(c < d.channels && g < d.order && y < d.height && x < d.width);
        self.data[d.index(c, g, y, x)]
    }

    /// `out[c, i, y, x] = self[c, (i + delta) mod G, y, x]`.
    pub fn cyclic_shift(&self, delta: i64) -> GroupTensor {
        let d = self.dims;
        Self {
            dims: d,
            data: shift_group_axis(&self.data, d.channels, d.order, d.plane(), delta),
        }
    }

    /// Rotate each spatial slice by `q` counter-clockwise quarter turns.
    pub fn rotate_spatial_quarter(&self, q: i64) -> Result<GroupTensor> {
        let d = self.dims;
        if d.height != d.width {
            return Err(Error::NonSquare {
                h: d.height,
                w: d.width,
            });
        }
        Ok(Self {
            dims: d,
            data: rotate_planes_quarter(&self.data, d.width, q),
        })
    }

    /// Bilinearly interpolate every `(c, g)` plane at `(y, x)`; the result is
    /// laid out as `c·G + g`.
    pub fn bilinear_sample(&self, y: f64, x: f64) -> Result<Vec<f32>> {
        let d = self.dims;
        let in_range = |v: f64, n: usize| v.is_finite() && v >= 0.0 && v <= (n - 1) as f64;
        if !in_range(y, d.height) || !in_range(x, d.width) {
            return Err(Error::OutOfBounds {
                y,
                x,
                h: d.height,
                w: d.width,
            });
        }
        let (y0, y1, fy) = lerp_index(y, d.height);
        let (x0, x1, fx) = lerp_index(x, d.width);
        let w00 = (1.0 - fy) * (1.0 - fx);
        let w01 = (1.0 - fy) * fx;
        let w10 = fy * (1.0 - fx);
        let w11 = fy * fx;
        Ok(self
            .data
            .chunks_exact(d.plane())
            .map(|p| {
                let v = w00 * p[y0 * d.width + x0] as f64
                    + w01 * p[y0 * d.width + x1] as f64
                    + w10 * p[y1 * d.width + x0] as f64
                    + w11 * p[y1 * d.width + x1] as f64;
                v as f32
            })
            .collect())
    }

    /// Single-channel view `F[c]` with dims `(1, G, H, W)`.
    pub fn channel(&self, c: usize) -> GroupTensor {
        let d = self.dims;
        assert!(c < d.channels);
        let n = d.order * d.plane();
        Self {
            dims: GroupDims { channels: 1, ..d },
            data: self.data[c * n..(c + 1) * n].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &GroupTensor) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let d = self.dims;
        Tensor::new(
            vec![d.channels, d.order, d.height, d.width],
            self.data.clone(),
        )
        .expect("dims match data")
    }

    /// Reinterpret a `(C·G, H, W)` or `(C, G, H, W)` tensor with the given group order.
    pub fn from_tensor(t: &Tensor<f32>, order: usize) -> Result<Self> {
        let s = t.shape();
        let (cg, h, w) = match *s {
            [c, g, h, w] => (c * g, h, w),
            [cg, h, w] => (cg, h, w),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "expected a rank 3 or 4 tensor, got {s:?}"
                )))
            }
        };
        if order == 0 || cg % order != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{cg} stacked channels not divisible by group order {order}"
            )));
        }
        let dims = GroupDims::new(cg / order, order, h, w)?;
        Self::new(dims, t.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(c: usize, g: usize, h: usize, w: usize) -> GroupTensor {
        let dims = GroupDims::new(c, g, h, w).unwrap();
        GroupTensor::new(dims, (0..dims.len()).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn shift_by_one_rotates_group_values() {
        let dims = GroupDims::new(1, 4, 1, 1).unwrap();
        let t = GroupTensor::new(dims, vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!(t.cyclic_shift(1).data(), &[20.0, 30.0, 40.0, 10.0]);
        assert_eq!(t.cyclic_shift(0), t);
        assert_eq!(t.cyclic_shift(4), t);
        assert_eq!(t.cyclic_shift(-1).data(), &[40.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn quarter_rotation_of_two_by_two() {
        let dims = GroupDims::new(1, 1, 2, 2).unwrap();
        let t = GroupTensor::new(dims, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.rotate_spatial_quarter(1).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(t.rotate_spatial_quarter(0).unwrap(), t);
        let mut r = t.clone();
        for _ in 0..4 {
            r = r.rotate_spatial_quarter(1).unwrap();
        }
        assert_eq!(r, t);
    }

    #[test]
    fn rotation_rejects_rectangles() {
        assert!(matches!(
            ramp(1, 1, 2, 3).rotate_spatial_quarter(1),
            Err(Error::NonSquare { h: 2, w: 3 })
        ));
    }

    #[test]
    fn sampling_at_nodes_and_midpoints() {
        let t = ramp(2, 3, 4, 5);
        let v = t.bilinear_sample(2.0, 3.0).unwrap();
        for c in 0..2 {
            for g in 0..3 {
                assert_eq!(v[c * 3 + g], t.get(c, g, 2, 3));
            }
        }
        let dims = GroupDims::new(1, 1, 2, 2).unwrap();
        let step = GroupTensor::new(dims, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(step.bilinear_sample(0.5, 0.5).unwrap(), vec![0.5]);
        let flat = GroupTensor::new(dims, vec![3.0; 4]).unwrap();
        assert_eq!(flat.bilinear_sample(0.5, 0.5).unwrap(), vec![3.0]);
        assert!(matches!(
            t.bilinear_sample(3.5, 0.0),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(t.bilinear_sample(-0.1, 0.0).is_err());
        assert!(t.bilinear_sample(3.0, 4.0).is_ok());
    }

    proptest! {
        #[test]
        fn shifts_compose(a in -20i64..20, b in -20i64..20, g in 1usize..7) {
            let t = ramp(2, g, 2, 3);
            prop_assert_eq!(t.cyclic_shift(a).cyclic_shift(b), t.cyclic_shift(a + b));
        }

        #[test]
        fn shift_preserves_group_reductions(delta in -9i64..9, vals in prop::collection::vec(-5.0f32..5.0, 12)) {
            let dims = GroupDims::new(3, 4, 1, 1).unwrap();
            let t = GroupTensor::new(dims, vals).unwrap();
            let s = t.cyclic_shift(delta);
            for c in 0..3 {
                let sum = |x: &GroupTensor| (0..4).map(|g| x.get(c, g, 0, 0)).sum::<f32>();
                let max = |x: &GroupTensor| (0..4).map(|g| x.get(c, g, 0, 0)).fold(f32::MIN, f32::max);
                prop_assert!((sum(&t) - sum(&s)).abs() < 1e-5);
                prop_assert_eq!(max(&t), max(&s));
            }
        }

        #[test]
        fn quarter_rotation_inverse(q in 0i64..4, n in 1usize..6) {
            let t = ramp(2, 2, n, n);
            let back = t.rotate_spatial_quarter(q).unwrap().rotate_spatial_quarter(4 - q).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn sampling_is_linear(
            a in prop::collection::vec(-1.0f32..1.0, 18),
            b in prop::collection::vec(-1.0f32..1.0, 18),
            alpha in -2.0f32..2.0, beta in -2.0f32..2.0,
            y in 0.0f64..2.0, x in 0.0f64..2.0,
        ) {
            let dims = GroupDims::new(1, 2, 3, 3).unwrap();
            let ta = GroupTensor::new(dims, a.clone()).unwrap();
            let tb = GroupTensor::new(dims, b.clone()).unwrap();
            let mix = GroupTensor::new(dims, a.iter().zip(&b).map(|(p, q)| alpha * p + beta * q).collect()).unwrap();
            let sa = ta.bilinear_sample(y, x).unwrap();
            let sb = tb.bilinear_sample(y, x).unwrap();
            let sm = mix.bilinear_sample(y, x).unwrap();
            for i in 0..sm.len() {
                prop_assert!((sm[i] - (alpha * sa[i] + beta * sb[i])).abs() < 1e-4);
            }
        }
    }
}
