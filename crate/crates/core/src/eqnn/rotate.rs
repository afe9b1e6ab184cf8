//! Spatial steering of square kernels.
//!
//! `rotate_angle(ψ, θ)(p) = ψ(R_θ⁻¹ p)` with `R_θ` acting on `(x, y)` offsets
//! from the kernel center, `x` to the right and `y` down: the same frame in
//! which homographies are written, so a positive `θ` is a clockwise turn as
//! displayed. Angles are split into `90°·q + r`; the quarter part is an exact
//! array rotation and only the residual `r ∈ [0°, 90°)` is resampled
//! bilinearly (zero outside the support). Splitting this way makes
//! `rotate_angle(ψ, θ + 90°)` exactly a quarter turn of `rotate_angle(ψ, θ)`.

use crate::gtensor::rotate_planes_quarter;

/// Split `theta` (degrees) into whole quarter turns and a residual in `[0, 90)`.
fn split_angle(theta: f64) -> (i64, f64) {
    let t = theta.rem_euclid(360.0);
    let quarters = t / 90.0;
    let nearest = quarters.round();
    if (quarters - nearest).abs() < 1e-9 {
        return ((nearest as i64).rem_euclid(4), 0.0);
    }
    let q = quarters.floor();
    (q as i64, t - 90.0 * q)
}

/// Input taps `(index, weight)` for every output element of a `k×k` rotation.
pub fn rotation_taps(k: usize, theta: f64) -> Vec<Vec<(usize, f64)>> {
    let (q, r) = split_angle(theta);
    let c = (k as f64 - 1.0) / 2.0;
    let (s, co) = r.to_radians().sin_cos();
    let residual: Vec<Vec<(usize, f64)>> = (0..k * k)
        .map(|o| {
            if r == 0.0 {
                return vec![(o, 1.0)];
            }
            let (row, col) = (o / k, o % k);
            let (x, y) = (col as f64 - c, row as f64 - c);
            // R_r⁻¹ (x, y)
            let sx = co * x + s * y + c;
            let sy = -s * x + co * y + c;
            let mut taps = Vec::with_capacity(4);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let (yy, xx) = (y0 + dy, x0 + dx);
                    let w = wy * wx;
                    if w > 1e-12 && yy >= 0.0 && xx >= 0.0 && yy < k as f64 && xx < k as f64 {
                        taps.push((yy as usize * k + xx as usize, w));
                    }
                }
            }
            taps
        })
        .collect();
    // A clockwise quarter turn is a counter-clockwise turn by −q.
    let order: Vec<usize> = rotate_planes_quarter(&(0..k * k).collect::<Vec<_>>(), k, -q);
    order.into_iter().map(|src| residual[src].clone()).collect()
}

/// Rotate a row-major `k×k` kernel by `theta` degrees.
pub fn rotate_angle(kernel: &[f64], k: usize, theta: f64) -> Vec<f64> {
    assert_eq!(kernel.len(), k * k);
    rotation_taps(k, theta)
        .iter()
        .map(|taps| taps.iter().map(|&(i, w)| w * kernel[i]).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const K3: [f64; 9] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];

    #[test]
    fn zero_angle_is_identity() {
        assert_eq!(rotate_angle(&K3, 3, 0.0), K3.to_vec());
        assert_eq!(rotate_angle(&K3, 3, 360.0), K3.to_vec());
    }

    #[test]
    fn ninety_degrees_is_clockwise_quarter_turn() {
        // 1 2 3      7 4 1
        // 4 5 6  ->  8 5 2
        // 7 8 9      9 6 3
        assert_eq!(
            rotate_angle(&K3, 3, 90.0),
            vec![7.0, 4.0, 1.0, 8.0, 5.0, 2.0, 9.0, 6.0, 3.0]
        );
        let four: Vec<f64> = (0..4).fold(K3.to_vec(), |k, _| rotate_angle(&k, 3, 90.0));
        assert_eq!(four, K3.to_vec());
    }

    #[test]
    fn symmetric_kernel_unchanged_at_45() {
        assert_eq!(rotate_angle(&[2.5], 1, 45.0), vec![2.5]);
        // bilinear resampling spreads a 3×3 delta, but keeps its center and
        // its four-fold symmetry
        let delta = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let r = rotate_angle(&delta, 3, 45.0);
        assert!((r[4] - 1.0).abs() < 1e-12);
        let turned = rotate_angle(&r, 3, 90.0);
        for (a, b) in r.iter().zip(&turned) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quarter_offsets_compose_exactly() {
        for base in [22.5, 45.0, 67.5, 10.0] {
            let a = rotate_angle(&K3, 3, base + 90.0);
            let b = rotate_angle(&rotate_angle(&K3, 3, base), 3, 90.0);
            assert_eq!(a, b, "base {base}");
        }
    }
}
