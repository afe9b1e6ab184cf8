use serde::Serialize;

use crate::datagen::Homography;
use crate::error::{Error, Result};
use crate::invmap::Descriptor;

/// A correspondence between keypoint `a` of the first image and `b` of the second.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Match {
    pub a: u32,
    pub b: u32,
    /// Cosine similarity of the matched descriptors.
    pub similarity: f32,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Cosine similarity matrix, row-major `|a| × |b|`. Rows are assumed unit norm.
pub fn similarity_matrix<A: AsRef<[f32]>, B: AsRef<[f32]>>(a: &[A], b: &[B]) -> Result<Vec<f64>> {
    let dim = |rows: &[&[f32]]| rows.first().map(|r| r.len());
    let ra: Vec<&[f32]> = a.iter().map(|r| r.as_ref()).collect();
    let rb: Vec<&[f32]> = b.iter().map(|r| r.as_ref()).collect();
    if let (Some(da), Some(db)) = (dim(&ra), dim(&rb)) {
        if let Some(bad) = ra.iter().chain(&rb).find(|r| r.len() != da) {
            return Err(Error::DimMismatch { a: da, b: bad.len() });
        }
        if da != db {
            return Err(Error::DimMismatch { a: da, b: db });
        }
    }
    let mut s = Vec::with_capacity(ra.len() * rb.len());
    for x in &ra {
        s.extend(rb.iter().map(|y| dot(x, y)));
    }
    Ok(s)
}

fn argmax(it: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in it.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Row-index pairs `(i, j)` that are each other's best match. Ties go to
/// the lowest index.
pub fn mutual_nn_rows<A: AsRef<[f32]>, B: AsRef<[f32]>>(a: &[A], b: &[B]) -> Result<Vec<(usize, usize, f64)>> {
    let s = similarity_matrix(a, b)?;
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Ok(Vec::new());
    }
    let best_b: Vec<usize> = (0..n)
        .map(|i| argmax(s[i * m..(i + 1) * m].iter().copied()).expect("non-empty"))
        .collect();
    let best_a: Vec<usize> = (0..m)
        .map(|j| argmax((0..n).map(|i| s[i * m + j])).expect("non-empty"))
        .collect();
    Ok((0..n)
        .filter(|&i| best_a[best_b[i]] == i)
        .map(|i| (i, best_b[i], s[i * m + best_b[i]]))
        .collect())
}

/// Mutual nearest neighbours between descriptor sets. Several descriptors of
/// one keypoint act as independent rows; the result holds each keypoint
/// pair once, ordered by `(a, b)`.
pub fn mutual_nn_match(da: &[Descriptor], db: &[Descriptor]) -> Result<Vec<Match>> {
    let ra: Vec<&[f32]> = da.iter().map(|d| &d.data[..]).collect();
    let rb: Vec<&[f32]> = db.iter().map(|d| &d.data[..]).collect();
    let mut out: Vec<Match> = mutual_nn_rows(&ra, &rb)?
        .into_iter()
        .map(|(i, j, s)| Match {
            a: da[i].keypoint,
            b: db[j].keypoint,
            similarity: s as f32,
        })
        .collect();
    out.sort_by(|x, y| (x.a, x.b).cmp(&(y.a, y.b)).then(y.similarity.total_cmp(&x.similarity)));
    out.dedup_by_key(|m| (m.a, m.b));
    Ok(out)
}

/// Reprojection error of a match under `h`; infinite when the point
/// projects to infinity or an id is unknown.
pub fn reprojection_error(m: &Match, kp_a: &[(f64, f64)], kp_b: &[(f64, f64)], h: &Homography) -> f64 {
    let (Some(&(xa, ya)), Some(&(xb, yb))) = (kp_a.get(m.a as usize), kp_b.get(m.b as usize)) else {
        return f64::INFINITY;
    };
    match h.project(xa, ya) {
        Some((px, py)) => ((px - xb).powi(2) + (py - yb).powi(2)).sqrt(),
        None => f64::INFINITY,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MmaResult {
    pub thresholds: Vec<f64>,
    pub predicted: usize,
    /// Correct matches per threshold.
    pub correct: Vec<usize>,
    /// `correct / predicted`, zero when nothing was predicted.
    pub mma: Vec<f64>,
}

/// Fraction of matches within each pixel threshold of the ground truth.
pub fn mma(matches: &[Match], kp_a: &[(f64, f64)], kp_b: &[(f64, f64)], h: &Homography, thresholds: &[f64]) -> MmaResult {
    let errors: Vec<f64> = matches.iter().map(|m| reprojection_error(m, kp_a, kp_b, h)).collect();
    let correct: Vec<usize> = thresholds
        .iter()
        .map(|t| errors.iter().filter(|e| **e <= *t).count())
        .collect();
    let n = matches.len();
    MmaResult {
        thresholds: thresholds.to_vec(),
        predicted: n,
        mma: correct
            .iter()
            .map(|c| if n == 0 { 0.0 } else { *c as f64 / n as f64 })
            .collect(),
        correct,
    }
}
