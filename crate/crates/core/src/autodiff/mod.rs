//! Tape-based reverse-mode differentiation.
//!
//! Every value on the [`Tape`] is produced by one entry of the [`Primitive`]
//! registry; the adjoint of each primitive is written out by hand in
//! [`Tape::backward`], so the set of differentiable operations stays small and
//! can be checked one op at a time against central differences
//! ([`check_gradients`]).

mod check;
pub mod kernels;
mod params;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

pub use check::{check_gradients, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use kernels::{ResizePlan, SamplePlan, SparseMap};
pub use params::{Parameter, ParamSet};

use crate::error::{Error, Result};
use crate::gtensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

macro_rules! primitives {
    ($($variant:ident => $name:literal),* $(,)?) => {
        /// Registry of every operation the tape can record.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum Primitive { $($variant),* }

        impl Primitive {
            pub const ALL: &'static [Primitive] = &[$(Primitive::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $(Primitive::$variant => $name),* }
            }
        }

        impl FromStr for Primitive {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(Primitive::$variant),)*
                    other => Err(Error::UnregisteredPrimitive(other.to_string())),
                }
            }
        }
    };
}

primitives! {
    Input => "input",
    Param => "param",
    LinearMap => "linear_map",
    Conv => "conv",
    ChannelBias => "channel_bias",
    AvgPool2 => "avg_pool2",
    Relu => "relu",
    Resize => "resize",
    Concat => "concat",
    BilinearSample => "bilinear_sample",
    Shift => "shift",
    SliceCols => "slice_cols",
    Softmax => "softmax",
    LogSoftmax => "log_softmax",
    Log => "log",
    Exp => "exp",
    Add => "add",
    Sub => "sub",
    Mul => "mul",
    Scale => "scale",
    Sum => "sum",
    MatMul => "matmul",
    L2Normalize => "l2_normalize",
    LogSumExp => "logsumexp",
    Diag => "diag",
    ChannelNorm => "channel_norm",
    Reshape => "reshape",
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    LinearMap(Arc<SparseMap>),
    Conv { cin: usize, cout: usize, k: usize, h: usize, w: usize },
    ChannelBias { repeat: usize },
    AvgPool2 { ch: usize, h: usize, w: usize },
    Relu,
    Resize { plan: Arc<ResizePlan>, ch: usize },
    Concat,
    Sample { plan: Arc<SamplePlan>, ch: usize },
    Shift { blocks: usize, order: usize, deltas: Arc<Vec<i64>> },
    SliceCols { cols: usize, start: usize, len: usize },
    Softmax,
    LogSoftmax,
    Log,
    Exp,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Sum,
    MatMulNT { m: usize, n: usize, d: usize },
    L2Normalize,
    LogSumExp { exclude_diag: bool },
    Diag,
    ChannelNorm { repeat: usize, eps: f64 },
    Reshape,
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Input => Primitive::Input,
            Op::Param => Primitive::Param,
            Op::LinearMap(_) => Primitive::LinearMap,
            Op::Conv { .. } => Primitive::Conv,
            Op::ChannelBias { .. } => Primitive::ChannelBias,
            Op::AvgPool2 { .. } => Primitive::AvgPool2,
            Op::Relu => Primitive::Relu,
            Op::Resize { .. } => Primitive::Resize,
            Op::Concat => Primitive::Concat,
            Op::Sample { .. } => Primitive::BilinearSample,
            Op::Shift { .. } => Primitive::Shift,
            Op::SliceCols { .. } => Primitive::SliceCols,
            Op::Softmax => Primitive::Softmax,
            Op::LogSoftmax => Primitive::LogSoftmax,
            Op::Log => Primitive::Log,
            Op::Exp => Primitive::Exp,
            Op::Add => Primitive::Add,
            Op::Sub => Primitive::Sub,
            Op::Mul => Primitive::Mul,
            Op::Scale(_) => Primitive::Scale,
            Op::Sum => Primitive::Sum,
            Op::MatMulNT { .. } => Primitive::MatMul,
            Op::L2Normalize => Primitive::L2Normalize,
            Op::LogSumExp { .. } => Primitive::LogSumExp,
            Op::Diag => Primitive::Diag,
            Op::ChannelNorm { .. } => Primitive::ChannelNorm,
            Op::Reshape => Primitive::Reshape,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Gradients of the tape root with respect to each registered parameter.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Ordered record of primitive applications.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, String)>,
    root: Option<Var>,
    corrupt: Option<Primitive>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Record a scalar loss by running `build` on a fresh tape.
pub fn forward<T: Real>(build: impl FnOnce(&mut Tape<T>) -> Result<Var>) -> Result<(T, Tape<T>)> {
    let mut tape = Tape::new();
    let root = build(&mut tape)?;
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "loss must be a scalar, got shape {:?}",
            v.shape()
        )));
    }
    let loss = v.item();
    tape.root = Some(root);
    Ok((loss, tape))
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn rank2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::ShapeMismatch(format!("{what} expects a matrix, got {shape:?}"))),
    }
}

fn rank3(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::ShapeMismatch(format!("{what} expects (C, H, W), got {shape:?}"))),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|v| (*v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            root: None,
            corrupt: None,
        }
    }

    /// Scale the adjoints emitted by `prim` by 1.5 (negative-control hook
    /// for gradient checking).
    pub fn corrupt_adjoint(&mut self, prim: Option<Primitive>) {
        self.corrupt = prim;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn primitive(&self, v: Var) -> Primitive {
        self.nodes[v.0].op.primitive()
    }

    pub fn root(&self) -> Option<Var> {
        self.root
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: Vec<Var>) -> Var {
        let requires_grad = match op {
            Op::Input => false,
            Op::Param => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, Vec::new())
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Param, Vec::new());
        self.params.push((v, name.into()));
        v
    }

    pub fn linear_map(&mut self, x: Var, map: Arc<SparseMap>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != map.in_len() || shape.iter().product::<usize>() != map.out_len() {
            return Err(Error::ShapeMismatch(format!(
                "linear map {}→{} applied to {:?} into {shape:?}",
                map.in_len(),
                map.out_len(),
                xv.shape()
            )));
        }
        let out = Tensor::new(shape, map.apply(xv.data()))?;
        Ok(self.push(out, Op::LinearMap(map), vec![x]))
    }

    /// Same-padded stride-1 correlation of `x: (Cin, H, W)` with `w: (Cout, Cin, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (cin, h, wd) = rank3(self.value(x).shape(), "conv2d input")?;
        let (cout, wcin, k) = match *self.value(w).shape() {
            [co, ci, k1, k2] if k1 == k2 && k1 % 2 == 1 => (co, ci, k1),
            ref s => return Err(Error::ShapeMismatch(format!("conv2d weight {s:?}"))),
        };
        if wcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        let out = kernels::conv2d(self.value(x).data(), cin, h, wd, self.value(w).data(), cout, k);
        let out = Tensor::new(vec![cout, h, wd], out)?;
        Ok(self.push(out, Op::Conv { cin, cout, k, h, w: wd }, vec![x, w]))
    }

    /// Add `b[c]` to channels `c·repeat .. (c+1)·repeat` of `x: (C·repeat, H, W)`.
    pub fn channel_bias(&mut self, x: Var, b: Var, repeat: usize) -> Result<Var> {
        let (ch, h, w) = rank3(self.value(x).shape(), "channel_bias")?;
        let nb = self.value(b).len();
        if nb * repeat != ch {
            return Err(Error::ShapeMismatch(format!(
                "bias of {nb} values x {repeat} for {ch} channels"
            )));
        }
        let plane = h * w;
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            let bv = bias[i / repeat];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(out, Op::ChannelBias { repeat }, vec![x, b]))
    }

    /// Mean over non-overlapping 2×2 blocks.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (ch, h, w) = rank3(self.value(x).shape(), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!("avg_pool2 needs even extents, got {h}x{w}")));
        }
        let out = Tensor::new(vec![ch, h / 2, w / 2], kernels::avg_pool2(self.value(x).data(), ch, h, w))?;
        Ok(self.push(out, Op::AvgPool2 { ch, h, w }, vec![x]))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect())
            .expect("shape preserved");
        self.push(out, op, vec![x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log, |v| v.ln())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp, |v| v.exp())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cf = T::of(c);
        self.unary(x, Op::Scale(c), move |v| v * cf)
    }

    pub fn resize(&mut self, x: Var, h2: usize, w2: usize) -> Result<Var> {
        let (ch, h, w) = rank3(self.value(x).shape(), "resize")?;
        let plan = Arc::new(ResizePlan::new((h, w), (h2, w2)));
        let out = Tensor::new(vec![ch, h2, w2], plan.forward(self.value(x).data(), ch))?;
        Ok(self.push(out, Op::Resize { plan, ch }, vec![x]))
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for x in xs {
            let v = self.value(*x);
            if v.shape().is_empty() || v.shape()[1..] != tail[..] {
                return Err(Error::ShapeMismatch(format!(
                    "concat: {:?} vs trailing {tail:?}",
                    v.shape()
                )));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat, xs.to_vec()))
    }

    /// Sample `x: (Ch, H, W)` at `(y, x)` points → `(points, Ch)`.
    pub fn bilinear_sample(&mut self, x: Var, points: &[(f64, f64)]) -> Result<Var> {
        let (ch, h, w) = rank3(self.value(x).shape(), "bilinear_sample")?;
        for &(py, px) in points {
            let ok = |v: f64, n: usize| v.is_finite() && v >= 0.0 && v <= (n - 1) as f64;
            if !ok(py, h) || !ok(px, w) {
                return Err(Error::OutOfBounds { y: py, x: px, h, w });
            }
        }
        let plan = Arc::new(SamplePlan::new(h, w, points));
        let out = Tensor::new(vec![points.len(), ch], plan.forward(self.value(x).data(), ch))?;
        Ok(self.push(out, Op::Sample { plan, ch }, vec![x]))
    }

    /// Row-wise cyclic group shift on `(K, blocks·order)`:
    /// `out[k, b·N + i] = x[k, b·N + (i + δ_k) mod N]`.
    pub fn shift_rows(&mut self, x: Var, order: usize, deltas: &[i64]) -> Result<Var> {
        let (rows, cols) = rank2(self.value(x).shape(), "shift_rows")?;
        if order == 0 || cols % order != 0 || deltas.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "shift_rows: {rows}x{cols} with order {order} and {} deltas",
                deltas.len()
            )));
        }
        let blocks = cols / order;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(xv.len());
        for (row, &d) in xv.chunks_exact(cols).zip(deltas) {
            data.extend(crate::gtensor::shift_group_axis(row, blocks, order, 1, d));
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let deltas = Arc::new(deltas.to_vec());
        Ok(self.push(out, Op::Shift { blocks, order, deltas }, vec![x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rank2(self.value(x).shape(), "slice_cols")?;
        if start + len > cols {
            return Err(Error::ShapeMismatch(format!("slice {start}+{len} of {cols} columns")));
        }
        let data = self
            .value(x)
            .data()
            .chunks_exact(cols)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(out, Op::SliceCols { cols, start, len }, vec![x]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = last_dim(xv.shape());
        let out = Tensor::new(xv.shape().to_vec(), softmax_rows(xv.data(), n)).expect("same shape");
        self.push(out, Op::Softmax, vec![x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = last_dim(xv.shape());
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|v| (*v - m).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|v| *v - lse));
        }
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::LogSoftmax, vec![x])
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, op.primitive().name())?;
        let data = av.data().iter().zip(bv.data()).map(|(p, q)| f(*p, *q)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, op, vec![a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |p, q| p * q)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum, vec![x])
    }

    /// `a · bᵀ` for `a: (m, d)`, `b: (n, d)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = rank2(self.value(a).shape(), "matmul lhs")?;
        let (n, d2) = rank2(self.value(b).shape(), "matmul rhs")?;
        if d != d2 {
            return Err(Error::ShapeMismatch(format!("matmul inner dims {d} vs {d2}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, d, n, self.value(a).data(), false, self.value(b).data(), true, T::zero(), &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMulNT { m, n, d }, vec![a, b]))
    }

    /// Divide each row (last axis) by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = last_dim(xv.shape());
        let tiny = T::of(1e-24);
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(n) {
            let r = (row.iter().map(|v| *v * *v).sum::<T>() + tiny).sqrt();
            data.extend(row.iter().map(|v| *v / r));
        }
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::L2Normalize, vec![x])
    }

    /// Row-wise `log Σ_j exp(x_ij)`, optionally skipping `j = i`.
    pub fn logsumexp_rows(&mut self, x: Var, exclude_diag: bool) -> Result<Var> {
        let (m, n) = rank2(self.value(x).shape(), "logsumexp")?;
        if exclude_diag && (n < 2 || m > n) {
            return Err(Error::ShapeMismatch(format!(
                "logsumexp without diagonal needs n >= 2 and m <= n, got {m}x{n}"
            )));
        }
        let data = self
            .value(x)
            .data()
            .chunks_exact(n)
            .enumerate()
            .map(|(i, row)| {
                let keep = |j: usize| !(exclude_diag && i == j);
                let mx = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| keep(*j))
                    .map(|(_, v)| *v)
                    .fold(T::neg_infinity(), T::max);
                let s: T = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| keep(*j))
                    .map(|(_, v)| (*v - mx).exp())
                    .sum();
                mx + s.ln()
            })
            .collect();
        let out = Tensor::new(vec![m], data)?;
        Ok(self.push(out, Op::LogSumExp { exclude_diag }, vec![x]))
    }

    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rank2(self.value(x).shape(), "diag")?;
        if m != n {
            return Err(Error::ShapeMismatch(format!("diag of non-square {m}x{n}")));
        }
        let xv = self.value(x).data();
        let out = Tensor::new(vec![n], (0..n).map(|i| xv[i * n + i]).collect())?;
        Ok(self.push(out, Op::Diag, vec![x]))
    }

    /// Standardize each group of `repeat` consecutive channels of `(C·repeat, H, W)`
    /// with statistics shared over the group and spatial axes.
    pub fn channel_norm(&mut self, x: Var, repeat: usize, eps: f64) -> Result<Var> {
        let (ch, h, w) = rank3(self.value(x).shape(), "channel_norm")?;
        if repeat == 0 || ch % repeat != 0 {
            return Err(Error::ShapeMismatch(format!("{ch} channels in groups of {repeat}")));
        }
        let span = repeat * h * w;
        let mut data = Vec::with_capacity(ch * h * w);
        for chunk in self.value(x).data().chunks_exact(span) {
            let n = T::of(span as f64);
            let mean = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::of(eps)).sqrt();
            data.extend(chunk.iter().map(|v| (*v - mean) * inv));
        }
        let out = Tensor::new(vec![ch, h, w], data)?;
        Ok(self.push(out, Op::ChannelNorm { repeat, eps }, vec![x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape, vec![x]))
    }

    /// Reverse accumulation from the recorded root.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let root = self
            .root
            .ok_or_else(|| Error::ShapeMismatch("backward before forward".into()))?;
        self.backward_from(root)
    }

    pub fn backward_from(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::ShapeMismatch("backward root must be scalar".into()));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(vec![T::one()]);

        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut contribs = self.adjoints(node, &g);
            if self.corrupt == Some(node.op.primitive()) {
                for (_, c) in contribs.iter_mut() {
                    c.iter_mut().for_each(|v| *v *= T::of(1.5));
                }
            }
            for (input, c) in contribs {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(c).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(c),
                }
            }
            // parameters keep their adjoint
            if matches!(node.op, Op::Param) {
                adj[id] = Some(g);
            }
        }

        let entries = self
            .params
            .iter()
            .map(|(v, name)| {
                let shape = self.value(*v).shape().to_vec();
                let data = adj[v.0]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); self.value(*v).len()]);
                (name.clone(), Tensor::new(shape, data).expect("adjoint shape"))
            })
            .collect();
        Ok(Gradients { entries })
    }

    /// Adjoint contributions of `node` to each of its inputs given its own adjoint `g`.
    fn adjoints(&self, node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let inp = |i: usize| node.inputs[i];
        let val = |i: usize| self.nodes[node.inputs[i].0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Input | Op::Param => Vec::new(),
            Op::LinearMap(map) => {
                let mut dx = vec![T::zero(); map.in_len()];
                map.apply_transpose_into(g, &mut dx);
                vec![(inp(0), dx)]
            }
            &Op::Conv { cin, cout, k, h, w } => {
                let need_dx = self.nodes[inp(0).0].requires_grad;
                let (dx, dw) = kernels::conv2d_backward(val(0), cin, h, w, val(1), cout, k, g, need_dx);
                let mut v = vec![(inp(1), dw)];
                if let Some(dx) = dx {
                    v.push((inp(0), dx));
                }
                v
            }
            &Op::ChannelBias { repeat } => {
                let nb = val(1).len();
                let plane = g.len() / (nb * repeat);
                let mut db = vec![T::zero(); nb];
                for (i, chunk) in g.chunks_exact(plane).enumerate() {
                    db[i / repeat] += chunk.iter().copied().sum::<T>();
                }
                vec![(inp(0), g.to_vec()), (inp(1), db)]
            }
            &Op::AvgPool2 { ch, h, w } => vec![(inp(0), kernels::avg_pool2_backward(g, ch, h, w))],
            Op::Relu => {
                let dx = g
                    .iter()
                    .zip(out)
                    .map(|(d, y)| if *y > T::zero() { *d } else { T::zero() })
                    .collect();
                vec![(inp(0), dx)]
            }
            Op::Resize { plan, ch } => vec![(inp(0), plan.backward(g, *ch))],
            Op::Concat => {
                let mut off = 0;
                node.inputs
                    .iter()
                    .map(|x| {
                        let n = self.nodes[x.0].value.len();
                        let part = g[off..off + n].to_vec();
                        off += n;
                        (*x, part)
                    })
                    .collect()
            }
            Op::Sample { plan, ch } => vec![(inp(0), plan.backward(g, *ch))],
            Op::Shift { blocks, order, deltas } => {
                let cols = blocks * order;
                let mut dx = Vec::with_capacity(g.len());
                for (row, &d) in g.chunks_exact(cols).zip(deltas.iter()) {
                    dx.extend(crate::gtensor::shift_group_axis(row, *blocks, *order, 1, -d));
                }
                vec![(inp(0), dx)]
            }
            &Op::SliceCols { cols, start, len } => {
                let rows = g.len() / len;
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![(inp(0), dx)]
            }
            Op::Softmax => {
                let n = last_dim(node.value.shape());
                let mut dx = Vec::with_capacity(g.len());
                for (gr, sr) in g.chunks_exact(n).zip(out.chunks_exact(n)) {
                    let dot: T = gr.iter().zip(sr).map(|(a, b)| *a * *b).sum();
                    dx.extend(gr.iter().zip(sr).map(|(a, s)| *s * (*a - dot)));
                }
                vec![(inp(0), dx)]
            }
            Op::LogSoftmax => {
                let n = last_dim(node.value.shape());
                let mut dx = Vec::with_capacity(g.len());
                for (gr, lr) in g.chunks_exact(n).zip(out.chunks_exact(n)) {
                    let gs: T = gr.iter().copied().sum();
                    dx.extend(gr.iter().zip(lr).map(|(a, l)| *a - l.exp() * gs));
                }
                vec![(inp(0), dx)]
            }
            Op::Log => vec![(inp(0), g.iter().zip(val(0)).map(|(d, x)| *d / *x).collect())],
            Op::Exp => vec![(inp(0), g.iter().zip(out).map(|(d, y)| *d * *y).collect())],
            Op::Add => vec![(inp(0), g.to_vec()), (inp(1), g.to_vec())],
            Op::Sub => vec![(inp(0), g.to_vec()), (inp(1), g.iter().map(|v| -*v).collect())],
            Op::Mul => vec![
                (inp(0), g.iter().zip(val(1)).map(|(d, b)| *d * *b).collect()),
                (inp(1), g.iter().zip(val(0)).map(|(d, a)| *d * *a).collect()),
            ],
            &Op::Scale(c) => {
                let c = T::of(c);
                vec![(inp(0), g.iter().map(|v| *v * c).collect())]
            }
            Op::Sum => vec![(inp(0), vec![g[0]; val(0).len()])],
            &Op::MatMulNT { m, n, d } => {
                let mut da = vec![T::zero(); m * d];
                T::gemm(m, n, d, g, false, val(1), false, T::zero(), &mut da);
                let mut db = vec![T::zero(); n * d];
                T::gemm(n, m, d, g, true, val(0), false, T::zero(), &mut db);
                vec![(inp(0), da), (inp(1), db)]
            }
            Op::L2Normalize => {
                let n = last_dim(node.value.shape());
                let tiny = T::of(1e-24);
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, yr), xr) in g.chunks_exact(n).zip(out.chunks_exact(n)).zip(val(0).chunks_exact(n)) {
                    let r = (xr.iter().map(|v| *v * *v).sum::<T>() + tiny).sqrt();
                    let dot: T = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(a, y)| (*a - *y * dot) / r));
                }
                vec![(inp(0), dx)]
            }
            &Op::LogSumExp { exclude_diag } => {
                let x = val(0);
                let n = x.len() / g.len();
                let mut dx = vec![T::zero(); x.len()];
                for (i, (row, gi)) in x.chunks_exact(n).zip(g).enumerate() {
                    let lse = out[i];
                    for (j, v) in row.iter().enumerate() {
                        if !(exclude_diag && i == j) {
                            dx[i * n + j] = *gi * (*v - lse).exp();
                        }
                    }
                }
                vec![(inp(0), dx)]
            }
            Op::Diag => {
                let n = g.len();
                let mut dx = vec![T::zero(); n * n];
                for i in 0..n {
                    dx[i * n + i] = g[i];
                }
                vec![(inp(0), dx)]
            }
            &Op::ChannelNorm { repeat, eps } => {
                let x = val(0);
                let (_, h, w) = rank3(node.value.shape(), "channel_norm").expect("recorded shape");
                let span = repeat * h * w;
                let mut dx = Vec::with_capacity(x.len());
                for ((xc, yc), gc) in x.chunks_exact(span).zip(out.chunks_exact(span)).zip(g.chunks_exact(span)) {
                    let n = T::of(span as f64);
                    let mean = xc.iter().copied().sum::<T>() / n;
                    let var = xc.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
                    let inv = T::one() / (var + T::of(eps)).sqrt();
                    let gm = gc.iter().copied().sum::<T>() / n;
                    let gy = gc.iter().zip(yc).map(|(a, b)| *a * *b).sum::<T>() / n;
                    dx.extend(gc.iter().zip(yc).map(|(a, y)| inv * (*a - gm - *y * gy)));
                }
                vec![(inp(0), dx)]
            }
            Op::Reshape => vec![(inp(0), g.to_vec())],
        }
    }
}
