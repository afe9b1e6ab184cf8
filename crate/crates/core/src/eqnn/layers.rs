//! Regular-representation convolutions over the cyclic group `C_N`.
//!
//! Only the base kernel is stored. The full filter bank is produced on the
//! tape by a fixed sparse linear map (rotated, group-shifted copies), so the
//! weight tying is exact and its adjoint is the transpose of that map.

use std::sync::Arc;

use rand::Rng;

use super::rotate::rotation_taps;
use crate::autodiff::{Parameter, SparseMap, Tape, Var};
use crate::error::{Error, Result};
use crate::gtensor::{GroupTensor, Real, ScalarImage, Tensor};

fn group_angle(g: usize, order: usize) -> f64 {
    g as f64 * 360.0 / order as f64
}

fn uniform_init(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
}

/// Number of 2× block averages realising `stride`.
fn pool_steps(stride: usize) -> Result<u32> {
    if stride == 0 || !stride.is_power_of_two() {
        return Err(Error::Config(format!("stride must be a power of two, got {stride}")));
    }
    Ok(stride.trailing_zeros())
}

/// Strided output via 2×2 block means after a stride-1 convolution; on even
/// grids the block partition is symmetric under quarter turns.
fn apply_stride<T: Real>(tape: &mut Tape<T>, mut y: Var, stride: usize) -> Result<Var> {
    for _ in 0..pool_steps(stride)? {
        y = tape.avg_pool2(y)?;
    }
    Ok(y)
}

/// First layer: scalar image to `C_out × N` regular-representation field.
#[derive(Clone, Debug)]
pub struct LiftingConv {
    pub weight: Parameter,
    pub bias: Parameter,
    pub order: usize,
    pub kernel: usize,
    pub stride: usize,
    expansion: Arc<SparseMap>,
}

impl LiftingConv {
    pub fn new(name: &str, c_out: usize, order: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Result<Self> {
        if order < 1 || kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("lifting conv needs N >= 1 and odd kernel, got N={order} k={kernel}")));
        }
        pool_steps(stride)?;
        let kk = kernel * kernel;
        let weight = Tensor::new(vec![c_out, 1, kernel, kernel], uniform_init(rng, c_out * kk, kk))?;
        let bias = Tensor::zeros(vec![c_out]);
        let taps: Vec<_> = (0..order).map(|g| rotation_taps(kernel, group_angle(g, order))).collect();
        let rows = (0..c_out).flat_map(|c| {
            let taps = &taps;
            (0..order).flat_map(move |g| {
                taps[g]
                    .iter()
                    .map(move |t| t.iter().map(|&(i, w)| (c * kk + i, w)).collect::<Vec<_>>())
            })
        });
        let expansion = Arc::new(SparseMap::from_rows(c_out * kk, rows));
        Ok(Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
            order,
            kernel,
            stride,
            expansion,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// Expanded filter bank `(C_out·N, 1, k, k)`.
    pub fn filter_bank<T: Real>(&self, tape: &mut Tape<T>, weight: Var) -> Result<Var> {
        let k = self.kernel;
        tape.linear_map(weight, self.expansion.clone(), vec![self.c_out() * self.order, 1, k, k])
    }

    /// `x: (1, H, W)` → `(C_out·N, H/s, W/s)` before activation.
    pub fn forward_graph<T: Real>(&self, tape: &mut Tape<T>, weight: Var, bias: Var, x: Var) -> Result<Var> {
        let bank = self.filter_bank(tape, weight)?;
        let y = tape.conv2d(x, bank)?;
        let y = apply_stride(tape, y, self.stride)?;
        tape.channel_bias(y, bias, self.order)
    }
}

/// Group convolution on regular-representation features.
#[derive(Clone, Debug)]
pub struct GroupConv {
    pub weight: Parameter,
    pub bias: Parameter,
    pub order: usize,
    pub kernel: usize,
    pub stride: usize,
    expansion: Arc<SparseMap>,
}

impl GroupConv {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        order: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if order < 1 || kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("group conv needs N >= 1 and odd kernel, got N={order} k={kernel}")));
        }
        pool_steps(stride)?;
        let kk = kernel * kernel;
        let n = order;
        let weight = Tensor::new(
            vec![c_out, c_in, n, kernel, kernel],
            uniform_init(rng, c_out * c_in * n * kk, c_in * n * kk),
        )?;
        let bias = Tensor::zeros(vec![c_out]);
        let taps: Vec<_> = (0..n).map(|g| rotation_taps(kernel, group_angle(g, n))).collect();
        // W[(co·N+g), (ci·N+h), o] = rot_g(ψ[co, ci, (h−g) mod N])[o]
        let mut rows = Vec::with_capacity(c_out * n * c_in * n * kk);
        for co in 0..c_out {
            for g in 0..n {
                for ci in 0..c_in {
                    for h in 0..n {
                        let rel = (h + n - g) % n;
                        let base = ((co * c_in + ci) * n + rel) * kk;
                        for t in &taps[g] {
                            rows.push(t.iter().map(|&(i, w)| (base + i, w)).collect::<Vec<_>>());
                        }
                    }
                }
            }
        }
        let expansion = Arc::new(SparseMap::from_rows(c_out * c_in * n * kk, rows));
        Ok(Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
            order,
            kernel,
            stride,
            expansion,
        })
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// Stored (learnable) scalars: `C_out·C_in·N·k² + C_out`.
    pub fn num_params(&self) -> usize {
        self.weight.value.len() + self.bias.value.len()
    }

    pub fn filter_bank<T: Real>(&self, tape: &mut Tape<T>, weight: Var) -> Result<Var> {
        let (k, n) = (self.kernel, self.order);
        tape.linear_map(weight, self.expansion.clone(), vec![self.c_out() * n, self.c_in() * n, k, k])
    }

    /// `x: (C_in·N, H, W)` → `(C_out·N, H/s, W/s)` before activation.
    pub fn forward_graph<T: Real>(&self, tape: &mut Tape<T>, weight: Var, bias: Var, x: Var) -> Result<Var> {
        let bank = self.filter_bank(tape, weight)?;
        let y = tape.conv2d(x, bank)?;
        let y = apply_stride(tape, y, self.stride)?;
        tape.channel_bias(y, bias, self.order)
    }
}

fn image_tensor<T: Real>(img: &ScalarImage) -> Tensor<T> {
    Tensor::new(
        vec![1, img.height(), img.width()],
        img.data().iter().map(|v| T::of(*v as f64)).collect(),
    )
    .expect("image dims")
}

/// Lifting convolution of an image (no activation).
pub fn lift_forward(layer: &LiftingConv, img: &ScalarImage) -> Result<GroupTensor> {
    if img.height() < layer.kernel || img.width() < layer.kernel {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} smaller than kernel {}",
            img.height(),
            img.width(),
            layer.kernel
        )));
    }
    let mut tape = Tape::<f32>::new();
    let x = tape.input(image_tensor(img));
    let w = tape.param(layer.weight.name.clone(), layer.weight.value.clone());
    let b = tape.param(layer.bias.name.clone(), layer.bias.value.clone());
    let y = layer.forward_graph(&mut tape, w, b, x)?;
    GroupTensor::from_tensor(tape.value(y), layer.order)
}

/// Group convolution of a feature map (no activation).
pub fn gconv_forward(layer: &GroupConv, x: &GroupTensor) -> Result<GroupTensor> {
    let d = x.dims();
    if d.order != layer.order || d.channels != layer.c_in() {
        return Err(Error::ShapeMismatch(format!(
            "group conv expects {} channels of order {}, got {} of order {}",
            layer.c_in(),
            layer.order,
            d.channels,
            d.order
        )));
    }
    let mut tape = Tape::<f32>::new();
    let xin = tape.input(Tensor::new(vec![d.channels * d.order, d.height, d.width], x.data().to_vec())?);
    let w = tape.param(layer.weight.name.clone(), layer.weight.value.clone());
    let b = tape.param(layer.bias.name.clone(), layer.bias.value.clone());
    let y = layer.forward_graph(&mut tape, w, b, xin)?;
    GroupTensor::from_tensor(tape.value(y), layer.order)
}

pub(crate) fn image_to_tensor<T: Real>(img: &ScalarImage) -> Tensor<T> {
    image_tensor(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gtensor::GroupDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn noise_image(n: usize, seed: u64) -> ScalarImage {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ScalarImage::from_fn(n, n, |_, _| r.random::<f32>())
    }

    #[test]
    fn constant_image_is_constant_over_group_in_interior() {
        let layer = LiftingConv::new("l", 3, 4, 3, 1, &mut rng()).unwrap();
        let out = lift_forward(&layer, &ScalarImage::filled(8, 8, 0.7)).unwrap();
        for c in 0..3 {
            for y in 1..7 {
                for x in 1..7 {
                    let v0 = out.get(c, 0, y, x);
                    for g in 1..4 {
                        assert!((out.get(c, g, y, x) - v0).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn one_by_one_kernel_scales_image() {
        let mut layer = LiftingConv::new("l", 1, 4, 1, 1, &mut rng()).unwrap();
        layer.weight.value.data_mut()[0] = 2.5;
        let img = noise_image(5, 1);
        let out = lift_forward(&layer, &img).unwrap();
        for g in 0..4 {
            for y in 0..5 {
                for x in 0..5 {
                    assert!((out.get(0, g, y, x) - 2.5 * img.get(y, x)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn lift_quarter_turn_law() {
        let layer = LiftingConv::new("l", 4, 4, 3, 1, &mut rng()).unwrap();
        let img = noise_image(10, 2);
        let lhs = lift_forward(&layer, &img.rotate_quarter(1).unwrap()).unwrap();
        let rhs = lift_forward(&layer, &img)
            .unwrap()
            .cyclic_shift(1)
            .rotate_spatial_quarter(1)
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-5, "{}", lhs.max_abs_diff(&rhs));
    }

    #[test]
    fn gconv_identity_filter() {
        let mut layer = GroupConv::new("g", 2, 2, 4, 3, 1, &mut rng()).unwrap();
        let w = layer.weight.value.data_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        // ψ[co=ci, ci, offset 0, center] = 1
        for c in 0..2 {
            w[((c * 2 + c) * 4) * 9 + 4] = 1.0;
        }
        let dims = GroupDims::new(2, 4, 5, 5).unwrap();
        let x = GroupTensor::from_fn(dims, |c, g, y, xx| (c * 100 + g * 10 + y * 3 + xx) as f32 * 0.01);
        let y = gconv_forward(&layer, &x).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn zero_kernels_broadcast_bias() {
        let mut layer = GroupConv::new("g", 2, 3, 4, 3, 1, &mut rng()).unwrap();
        layer.weight.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        layer.bias.value.data_mut().copy_from_slice(&[1.0, -2.0, 0.5]);
        let dims = GroupDims::new(2, 4, 4, 4).unwrap();
        let y = gconv_forward(&layer, &GroupTensor::from_fn(dims, |_, _, _, _| 1.0)).unwrap();
        for c in 0..3 {
            for g in 0..4 {
                assert_eq!(y.get(c, g, 2, 1), [1.0, -2.0, 0.5][c]);
            }
        }
    }

    #[test]
    fn gconv_quarter_turn_law() {
        for order in [4, 8] {
            let layer = GroupConv::new("g", 2, 3, order, 3, 1, &mut rng()).unwrap();
            let dims = GroupDims::new(2, order, 8, 8).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(9);
            let x = GroupTensor::from_fn(dims, |_, _, _, _| r.random::<f32>() - 0.5);
            // a counter-clockwise quarter turn shifts the group axis by +N/4
            let q = (order / 4) as i64;
            let tx = x.cyclic_shift(q).rotate_spatial_quarter(1).unwrap();
            let lhs = gconv_forward(&layer, &tx).unwrap();
            let rhs = gconv_forward(&layer, &x)
                .unwrap()
                .cyclic_shift(q)
                .rotate_spatial_quarter(1)
                .unwrap();
            assert!(lhs.max_abs_diff(&rhs) <= 1e-5, "order {order}: {}", lhs.max_abs_diff(&rhs));
        }
    }

    #[test]
    fn param_count_ignores_expansion() {
        let layer = GroupConv::new("g", 3, 5, 8, 3, 1, &mut rng()).unwrap();
        assert_eq!(layer.num_params(), 5 * 3 * 8 * 9 + 5);
    }

    #[test]
    fn strided_lift_halves_extent() {
        let layer = LiftingConv::new("l", 2, 4, 3, 2, &mut rng()).unwrap();
        let out = lift_forward(&layer, &noise_image(8, 4)).unwrap();
        assert_eq!((out.dims().height, out.dims().width), (4, 4));
        assert!(LiftingConv::new("l", 2, 4, 3, 3, &mut rng()).is_err());
    }
}
