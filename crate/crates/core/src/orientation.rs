//! Orientation histograms from the first feature channel.

use crate::gtensor::GroupTensor;

/// Default score ratio for multi-candidate extraction.
pub const DEFAULT_RATIO: f64 = 0.6;
/// Default cap on candidates per keypoint.
pub const DEFAULT_K_MAX: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientationEstimate {
    /// Bin center in degrees, `Δ·360/|G|`.
    pub theta: f64,
    /// Shift index in `[0, |G|)`.
    pub delta: usize,
    pub score: f32,
}

impl OrientationEstimate {
    fn at(o: &[f32], delta: usize) -> Self {
        Self {
            theta: delta as f64 * 360.0 / o.len() as f64,
            delta,
            score: o[delta],
        }
    }
}

/// `O = F[0]`, a `1 × |G| × H × W` tensor.
pub fn histogram_map(f: &GroupTensor) -> GroupTensor {
    f.channel(0)
}

/// Argmax bin; ties go to the lowest index.
pub fn dominant_orientation(o: &[f32]) -> OrientationEstimate {
    assert!(!o.is_empty(), "empty orientation histogram");
    let mut best = 0;
    for (i, v) in o.iter().enumerate().skip(1) {
        if *v > o[best] {
            best = i;
        }
    }
    OrientationEstimate::at(o, best)
}

/// Bins scoring at least `ratio · max`, best first, at most `k_max`.
/// `ratio = 0` selects the static top-`k_max` bins.
///
/// Raw scores are compared. With non-positive maxima the threshold is taken
/// relative to the spread above the minimum so the rule stays scale-free.
pub fn candidate_orientations(o: &[f32], ratio: f64, k_max: usize) -> Vec<OrientationEstimate> {
    let top = dominant_orientation(o);
    let mut order: Vec<usize> = (0..o.len()).collect();
    // stable sort keeps the lowest index first among equal scores
    order.sort_by(|&a, &b| o[b].total_cmp(&o[a]));
    let max = top.score as f64;
    let threshold = if max > 0.0 {
        ratio * max
    } else {
        let min = o.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        min + ratio * (max - min)
    };
    let mut out: Vec<OrientationEstimate> = order
        .into_iter()
        .filter(|&i| ratio <= 0.0 || o[i] as f64 >= threshold)
        .take(k_max.max(1))
        .map(|i| OrientationEstimate::at(o, i))
        .collect();
    if out.first().map(|e| e.delta) != Some(top.delta) {
        out.insert(0, top);
        out.truncate(k_max.max(1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gtensor::GroupDims;
    use proptest::prelude::*;

    #[test]
    fn argmax_examples() {
        let e = dominant_orientation(&[0.1, 0.9, 0.2, 0.3]);
        assert_eq!((e.delta, e.theta, e.score), (1, 90.0, 0.9));
        assert_eq!(dominant_orientation(&[0.5; 4]).delta, 0);
        let mut o = vec![0.0; 16];
        o[4] = 1.0;
        assert_eq!(dominant_orientation(&o).theta, 90.0);
    }

    #[test]
    fn ratio_and_topk() {
        let o = [1.0, 0.7, 0.3, 0.1];
        let c: Vec<usize> = candidate_orientations(&o, 0.6, 4).iter().map(|e| e.delta).collect();
        assert_eq!(c, vec![0, 1]);
        assert_eq!(candidate_orientations(&o, 1.0, 4).len(), 1);
        let c: Vec<usize> = candidate_orientations(&[0.2, 0.9, 0.5, 0.7], 0.0, 3)
            .iter()
            .map(|e| e.delta)
            .collect();
        assert_eq!(c, vec![1, 3, 2]);
    }

    #[test]
    fn histogram_is_first_channel() {
        let dims = GroupDims::new(1, 4, 2, 2).unwrap();
        let f = GroupTensor::from_fn(dims, |_, g, y, x| (g + y + x) as f32);
        assert_eq!(histogram_map(&f), f);
        let dims = GroupDims::new(3, 4, 2, 2).unwrap();
        let f = GroupTensor::from_fn(dims, |c, _, _, _| if c == 0 { 1.0 } else { 5.0 });
        assert!(histogram_map(&f).data().iter().all(|v| *v == 1.0));
    }

    proptest! {
        #[test]
        fn argmax_tracks_shift(o in prop::collection::vec(-5.0f32..5.0, 8), d in 0usize..8) {
            let top = dominant_orientation(&o);
            prop_assume!(o.iter().filter(|v| **v == top.score).count() == 1);
            let shifted: Vec<f32> = (0..8).map(|i| o[(i + d) % 8]).collect();
            prop_assert_eq!(dominant_orientation(&shifted).delta, (top.delta + 8 - d) % 8);
        }

        #[test]
        fn candidates_lead_with_dominant_and_ignore_scale(
            o in prop::collection::vec(-5.0f32..5.0, 4..17),
            ratio in 0.0f64..1.0,
            k in 1usize..5,
            s in 0.1f32..10.0,
        ) {
            let c = candidate_orientations(&o, ratio, k);
            prop_assert_eq!(c[0].delta, dominant_orientation(&o).delta);
            prop_assert!(c.len() <= k);
            let scaled: Vec<f32> = o.iter().map(|v| v * s).collect();
            let a: Vec<usize> = c.iter().map(|e| e.delta).collect();
            let b: Vec<usize> = candidate_orientations(&scaled, ratio, k).iter().map(|e| e.delta).collect();
            // scaling can only flip bins sitting exactly on the threshold
            prop_assert!(a.len().abs_diff(b.len()) <= 1 && a.iter().zip(&b).take(a.len().min(b.len())).all(|(x, y)| x == y));
        }
    }
}
