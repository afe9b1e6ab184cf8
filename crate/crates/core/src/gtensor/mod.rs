//! Dense tensors and the cyclic-group index algebra.
//!
//! [`GroupTensor`] is the regular-representation feature map with layout
//! `channel → group → row → col`. [`Tensor`] is the untyped, rank-agnostic
//! buffer the autodiff tape works with; it is generic over [`Real`] so the
//! same network code runs in `f32` for training and `f64` for gradient checks.

mod dump;
mod group;
mod image;

pub use dump::{read_dump, write_dump, DUMP_MAGIC};
pub use group::{GroupDims, GroupTensor};
pub use image::ScalarImage;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point scalar usable on the tape.
pub trait Real:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Row-major `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`
    /// after optional transposition of the stored operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );
}

fn gemm_strides(m: usize, k: usize, n: usize, a_trans: bool, b_trans: bool) -> [isize; 6] {
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    [rsa as isize, csa as isize, rsb as isize, csb as isize, n as isize, 1]
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let [rsa, csa, rsb, csb, rsc, csc] = gemm_strides(m, k, n, a_trans, b_trans);
                // SAFETY: the assert above bounds every index the strides reach.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major dense buffer with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Cyclically shift the group axis of a `[blocks][order][plane]` buffer:
/// `out[b, i, ..] = src[b, (i + delta) mod order, ..]`.
pub(crate) fn shift_group_axis<T: Copy>(
    src: &[T],
    blocks: usize,
    order: usize,
    plane: usize,
    delta: i64,
) -> Vec<T> {
    debug_assert_eq!(src.len(), blocks * order * plane);
    let d = delta.rem_euclid(order as i64) as usize;
    let mut out = Vec::with_capacity(src.len());
    for b in 0..blocks {
        let base = b * order * plane;
        for i in 0..order {
            let j = (i + d) % order;
            out.extend_from_slice(&src[base + j * plane..base + (j + 1) * plane]);
        }
    }
    out
}

/// Rotate every `n×n` plane of `src` by `q` counter-clockwise quarter turns
/// (as displayed with row 0 on top).
pub(crate) fn rotate_planes_quarter<T: Copy>(src: &[T], n: usize, q: i64) -> Vec<T> {
    let plane = n * n;
    let q = q.rem_euclid(4);
    let mut out = Vec::with_capacity(src.len());
    for p in src.chunks_exact(plane) {
        for r in 0..n {
            for c in 0..n {
                let (sr, sc) = match q {
                    0 => (r, c),
                    1 => (c, n - 1 - r),
                    2 => (n - 1 - r, n - 1 - c),
                    _ => (n - 1 - c, r),
                };
                out.push(p[sr * n + sc]);
            }
        }
    }
    out
}

/// Bilinear interpolation weights for a location inside `[0, len-1]`.
#[inline]
pub(crate) fn lerp_index(v: f64, len: usize) -> (usize, usize, f64) {
    if len == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (v.floor() as usize).min(len - 2);
    (i0, i0 + 1, v - i0 as f64)
}
