//! Numeric kernels shared by primitive forward and adjoint passes.

use crate::gtensor::{lerp_index, Real};

/// Sparse linear operator `out[i] = Σ_j A_ij · in[j]` stored row-compressed.
#[derive(Clone, Debug)]
pub struct SparseMap {
    in_len: usize,
    offsets: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl SparseMap {
    /// Build from one `(input index, weight)` list per output element.
    pub fn from_rows(in_len: usize, rows: impl IntoIterator<Item = Vec<(usize, f64)>>) -> Self {
        let mut offsets = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for row in rows {
            for (j, w) in row {
                assert!(j < in_len, "sparse map column {j} >= {in_len}");
                if w != 0.0 {
                    cols.push(j as u32);
                    vals.push(w);
                }
            }
            offsets.push(cols.len());
        }
        Self {
            in_len,
            offsets,
            cols,
            vals,
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn apply<T: Real>(&self, x: &[T]) -> Vec<T> {
        (0..self.out_len())
            .map(|i| {
                let mut acc = T::zero();
                for p in self.offsets[i]..self.offsets[i + 1] {
                    acc += T::of(self.vals[p]) * x[self.cols[p] as usize];
                }
                acc
            })
            .collect()
    }

    pub fn apply_transpose_into<T: Real>(&self, dy: &[T], dx: &mut [T]) {
        for (i, g) in dy.iter().enumerate() {
            for p in self.offsets[i]..self.offsets[i + 1] {
                dx[self.cols[p] as usize] += T::of(self.vals[p]) * *g;
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let hw = h * w;
    let mut cols = vec![T::zero(); cin * k * k * hw];
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = sy as usize * w;
                    let sx0 = (x_lo as isize + dx) as usize;
                    dst[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&plane[src_row + sx0..src_row + sx0 + (x_hi - x_lo)]);
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, dx_out: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = sy as usize * w;
                    let sx0 = (x_lo as isize + dx) as usize;
                    for (d, s) in plane[base + sx0..base + sx0 + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&src[y * w + x_lo..y * w + x_hi])
                    {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation with zero "same" padding.
/// `x: (cin, h, w)`, `wt: (cout, cin, k, k)` → `(cout, h, w)`.
pub fn conv2d<T: Real>(x: &[T], cin: usize, h: usize, w: usize, wt: &[T], cout: usize, k: usize) -> Vec<T> {
    let cols = im2col(x, cin, h, w, k);
    let mut out = vec![T::zero(); cout * h * w];
    T::gemm(cout, cin * k * k, h * w, wt, false, &cols, false, T::zero(), &mut out);
    out
}

/// Adjoints of [`conv2d`]: `(dx, dw)`; `dx` is skipped when not needed.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    wt: &[T],
    cout: usize,
    k: usize,
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let ckk = cin * k * k;
    let hw = h * w;
    let cols = im2col(x, cin, h, w, k);
    let mut dw = vec![T::zero(); cout * ckk];
    T::gemm(cout, hw, ckk, dy, false, &cols, true, T::zero(), &mut dw);
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); ckk * hw];
        T::gemm(ckk, cout, hw, wt, true, dy, false, T::zero(), &mut dcols);
        let mut dx = vec![T::zero(); cin * hw];
        col2im_add(&dcols, cin, h, w, k, &mut dx);
        dx
    });
    (dx, dw)
}

pub fn avg_pool2<T: Real>(x: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = Vec::with_capacity(ch * h2 * w2);
    for c in 0..ch {
        let p = &x[c * h * w..(c + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * w + 2 * xx;
                out.push((p[i] + p[i + 1] + p[i + w] + p[i + w + 1]) * quarter);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(dy: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); ch * h * w];
    for c in 0..ch {
        for y in 0..h2 {
            for xx in 0..w2 {
                let g = dy[(c * h2 + y) * w2 + xx] * quarter;
                let i = c * h * w + 2 * y * w + 2 * xx;
                dx[i] += g;
                dx[i + 1] += g;
                dx[i + w] += g;
                dx[i + w + 1] += g;
            }
        }
    }
    dx
}

/// Separable bilinear resize plan with half-pixel centers.
#[derive(Clone, Debug)]
pub struct ResizePlan {
    pub src: (usize, usize),
    pub dst: (usize, usize),
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn axis_plan(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let s = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let v = ((i as f64 + 0.5) * s - 0.5).clamp(0.0, (src - 1) as f64);
            lerp_index(v, src)
        })
        .collect()
}

impl ResizePlan {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        Self {
            src,
            dst,
            rows: axis_plan(src.0, dst.0),
            cols: axis_plan(src.1, dst.1),
        }
    }

    pub fn forward<T: Real>(&self, x: &[T], ch: usize) -> Vec<T> {
        let (h, w) = self.src;
        let mut out = Vec::with_capacity(ch * self.dst.0 * self.dst.1);
        for c in 0..ch {
            let p = &x[c * h * w..(c + 1) * h * w];
            for &(y0, y1, fy) in &self.rows {
                for &(x0, x1, fx) in &self.cols {
                    let v = (1.0 - fy) * ((1.0 - fx) * p[y0 * w + x0].as_f64() + fx * p[y0 * w + x1].as_f64())
                        + fy * ((1.0 - fx) * p[y1 * w + x0].as_f64() + fx * p[y1 * w + x1].as_f64());
                    out.push(T::of(v));
                }
            }
        }
        out
    }

    pub fn backward<T: Real>(&self, dy: &[T], ch: usize) -> Vec<T> {
        let (h, w) = self.src;
        let mut dx = vec![T::zero(); ch * h * w];
        let mut it = dy.iter();
        for c in 0..ch {
            let p = &mut dx[c * h * w..(c + 1) * h * w];
            for &(y0, y1, fy) in &self.rows {
                for &(x0, x1, fx) in &self.cols {
                    let g = *it.next().unwrap();
                    p[y0 * w + x0] += T::of((1.0 - fy) * (1.0 - fx)) * g;
                    p[y0 * w + x1] += T::of((1.0 - fy) * fx) * g;
                    p[y1 * w + x0] += T::of(fy * (1.0 - fx)) * g;
                    p[y1 * w + x1] += T::of(fy * fx) * g;
                }
            }
        }
        dx
    }
}

/// Precomputed 4-neighbour weights for sampling a `(ch, h, w)` map at points.
#[derive(Clone, Debug)]
pub struct SamplePlan {
    pub h: usize,
    pub w: usize,
    taps: Vec<[(usize, f64); 4]>,
}

impl SamplePlan {
    /// Points are `(y, x)` and must already lie inside `[0, h-1] × [0, w-1]`.
    pub fn new(h: usize, w: usize, points: &[(f64, f64)]) -> Self {
        let taps = points
            .iter()
            .map(|&(y, x)| {
                let (y0, y1, fy) = lerp_index(y, h);
                let (x0, x1, fx) = lerp_index(x, w);
                [
                    (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * w + x1, (1.0 - fy) * fx),
                    (y1 * w + x0, fy * (1.0 - fx)),
                    (y1 * w + x1, fy * fx),
                ]
            })
            .collect();
        Self { h, w, taps }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// `(ch, h, w)` → `(points, ch)`.
    pub fn forward<T: Real>(&self, x: &[T], ch: usize) -> Vec<T> {
        let hw = self.h * self.w;
        let mut out = Vec::with_capacity(self.taps.len() * ch);
        for taps in &self.taps {
            for c in 0..ch {
                let p = &x[c * hw..];
                let v: f64 = taps.iter().map(|&(i, wgt)| wgt * p[i].as_f64()).sum();
                out.push(T::of(v));
            }
        }
        out
    }

    pub fn backward<T: Real>(&self, dy: &[T], ch: usize) -> Vec<T> {
        let hw = self.h * self.w;
        let mut dx = vec![T::zero(); ch * hw];
        for (k, taps) in self.taps.iter().enumerate() {
            for c in 0..ch {
                let g = dy[k * ch + c];
                for &(i, wgt) in taps {
                    dx[c * hw + i] += T::of(wgt) * g;
                }
            }
        }
        dx
    }
}
