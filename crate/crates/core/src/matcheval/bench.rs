use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;

use super::matching::{mma, mutual_nn_match, Match};
use super::pyramid::{FeaturePyramid, ScalePyramidConfig};
use super::ransac::{hestimation, HEstimation, RansacConfig};
use super::roto::RotoBenchmark;
use crate::datagen::{detect_harris, HarrisParams, Mask, TrainingPair};
use crate::eqnn::Backbone;
use crate::error::{Error, Result};
use crate::gtensor::ScalarImage;
use crate::invmap::{keypoint_feature, Method, Orientation};
use crate::losses::quantize_shift;
use crate::orientation::dominant_orientation;

/// Where target keypoints come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Source detections projected by the ground truth.
    Gt,
    /// Independent detection on the target.
    Pred,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(Protocol::Gt),
            "pred" => Ok(Protocol::Pred),
            _ => Err(Error::Config(format!("unknown protocol `{s}` (gt|pred)"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Gt => "gt",
            Protocol::Pred => "pred",
        })
    }
}

/// Shift selection for `align`; ignored by the pooling methods.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum OrientationMode {
    Dominant,
    Candidates { ratio: f64, k_max: usize },
    /// Source shifted by 0, target by the quantized ground-truth angle.
    GroundTruth,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodSpec {
    pub method: Method,
    pub orientation: OrientationMode,
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            orientation: OrientationMode::Dominant,
        }
    }

    pub fn align_gt() -> Self {
        Self {
            method: Method::Align,
            orientation: OrientationMode::GroundTruth,
        }
    }

    pub fn align_candidates(ratio: f64, k_max: usize) -> Self {
        Self {
            method: Method::Align,
            orientation: OrientationMode::Candidates { ratio, k_max },
        }
    }

    /// `align`, `align-gt`, `align-c0.6`, `avg`, …
    pub fn name(&self) -> String {
        match (self.method, self.orientation) {
            (Method::Align, OrientationMode::GroundTruth) => "align-gt".into(),
            (Method::Align, OrientationMode::Candidates { ratio, .. }) => format!("align-c{ratio}"),
            (m, _) => m.name().into(),
        }
    }

    fn orientation_for(&self, n: usize, delta: usize) -> Orientation {
        match self.orientation {
            OrientationMode::Dominant => Orientation::Dominant,
            OrientationMode::Candidates { ratio, k_max } => Orientation::Candidates { ratio, k_max },
            OrientationMode::GroundTruth => Orientation::Given(vec![delta; n]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub protocol: Protocol,
    /// Keypoints per image.
    pub keypoints: usize,
    pub harris: HarrisParams,
    /// Keep only keypoints inside the central disk that stays in view under
    /// every rotation about the center.
    pub central_disk: bool,
    pub thresholds: Vec<f64>,
    pub ransac: RansacConfig,
    pub pyramid: Option<ScalePyramidConfig>,
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Gt,
            keypoints: 128,
            harris: HarrisParams::default(),
            central_disk: true,
            thresholds: vec![3.0, 5.0, 10.0],
            ransac: RansacConfig::default(),
            pyramid: None,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PairResult {
    pub id: usize,
    pub source: usize,
    pub angle: f64,
    pub keypoints_a: usize,
    pub keypoints_b: usize,
    #[serde(skip)]
    pub matches: Vec<Match>,
    pub predicted: usize,
    /// Correct matches per threshold.
    pub correct: Vec<usize>,
    pub mma: Vec<f64>,
    pub hest: HEstimation,
    pub ransac_seed: u64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Summary {
    pub pairs: usize,
    /// Mean of per-pair MMA with zero-prediction pairs scored 0.
    pub mma: Vec<f64>,
    /// Mean of per-pair MMA over pairs with at least one prediction.
    pub mma_nonempty: Vec<f64>,
    /// Σ correct / Σ predicted.
    pub mma_pooled: Vec<f64>,
    pub zero_prediction_pairs: usize,
    pub mean_predicted: f64,
    pub hest_rate: f64,
    pub mean_inliers: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnglePoint {
    pub angle: f64,
    pub mma: Vec<f64>,
    pub mean_predicted: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MatchReport {
    pub method: String,
    pub protocol: Protocol,
    pub thresholds: Vec<f64>,
    pub ransac_seed: u64,
    pub summary: Summary,
    pub curve: Vec<AnglePoint>,
    #[serde(skip)]
    pub pairs: Vec<PairResult>,
}

impl MatchReport {
    /// Summary MMA at `threshold`, if it was evaluated.
    pub fn mma_at(&self, threshold: f64) -> Option<f64> {
        let i = self.thresholds.iter().position(|t| *t == threshold)?;
        Some(self.summary.mma[i])
    }

    /// Max minus min of the per-angle curve at `threshold`.
    pub fn curve_spread(&self, threshold: f64) -> Option<f64> {
        let i = self.thresholds.iter().position(|t| *t == threshold)?;
        let v = self.curve.iter().map(|p| p.mma[i]);
        let hi = v.clone().fold(f64::NEG_INFINITY, f64::max);
        let lo = v.fold(f64::INFINITY, f64::min);
        Some(hi - lo)
    }

    /// Per-pair rows: `pair,source,angle,pred,correct@t…,hest_pass,corner_err`.
    pub fn write_pairs_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        write!(out, "pair,source,angle,pred")?;
        for t in &self.thresholds {
            write!(out, ",correct@{t}")?;
        }
        writeln!(out, ",hest_pass,corner_err")?;
        for p in &self.pairs {
            write!(out, "{},{},{},{}", p.id, p.source, p.angle, p.predicted)?;
            for c in &p.correct {
                write!(out, ",{c}")?;
            }
            let err = p.hest.corner_error.map(|e| format!("{e:.4}")).unwrap_or_default();
            writeln!(out, ",{},{err}", p.hest.pass as u8)?;
        }
        Ok(())
    }

    /// Per-angle rows: `angle,mma@t…,mean_pred`.
    pub fn write_curve_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        write!(out, "angle")?;
        for t in &self.thresholds {
            write!(out, ",mma@{t}")?;
        }
        writeln!(out, ",mean_pred")?;
        for p in &self.curve {
            write!(out, "{}", p.angle)?;
            for m in &p.mma {
                write!(out, ",{m:.6}")?;
            }
            writeln!(out, ",{:.3}", p.mean_predicted)?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn disk_mask(h: usize, w: usize, margin: usize) -> Mask {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let r = (h.min(w) as f64 / 2.0 - margin as f64).max(0.0);
    Mask::from_fn(h, w, |y, x| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r)
}

fn detect(img: &ScalarImage, cfg: &BenchConfig, valid: Option<&Mask>) -> Vec<(f64, f64)> {
    let disk = cfg.central_disk.then(|| disk_mask(img.height(), img.width(), cfg.harris.margin));
    let mask = match (disk, valid) {
        (Some(d), Some(v)) => Some(d.and(v)),
        (Some(d), None) => Some(d),
        (None, v) => v.cloned(),
    };
    detect_harris(img, cfg.keypoints, &cfg.harris, mask.as_ref())
        .into_iter()
        .map(|k| (k.x, k.y))
        .collect()
}

/// Map `f` over `0..n` on up to `threads` scoped threads, results in order.
fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let f = &f;
                s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn summarize(pairs: &[PairResult], nt: usize) -> Summary {
    let nonempty: Vec<&PairResult> = pairs.iter().filter(|p| p.predicted > 0).collect();
    let total_pred: usize = pairs.iter().map(|p| p.predicted).sum();
    Summary {
        pairs: pairs.len(),
        mma: (0..nt).map(|i| mean(pairs.iter().map(|p| p.mma[i]))).collect(),
        mma_nonempty: (0..nt).map(|i| mean(nonempty.iter().map(|p| p.mma[i]))).collect(),
        mma_pooled: (0..nt)
            .map(|i| {
                let c: usize = pairs.iter().map(|p| p.correct[i]).sum();
                if total_pred == 0 {
                    0.0
                } else {
                    c as f64 / total_pred as f64
                }
            })
            .collect(),
        zero_prediction_pairs: pairs.len() - nonempty.len(),
        mean_predicted: mean(pairs.iter().map(|p| p.predicted as f64)),
        hest_rate: mean(pairs.iter().map(|p| p.hest.pass as u8 as f64)),
        mean_inliers: mean(pairs.iter().map(|p| p.hest.inliers as f64)),
    }
}

fn curve(pairs: &[PairResult], angles: &[f64], nt: usize) -> Vec<AnglePoint> {
    angles
        .iter()
        .map(|&a| {
            let at: Vec<&PairResult> = pairs.iter().filter(|p| p.angle == a).collect();
            AnglePoint {
                angle: a,
                mma: (0..nt).map(|i| mean(at.iter().map(|p| p.mma[i]))).collect(),
                mean_predicted: mean(at.iter().map(|p| p.predicted as f64)),
            }
        })
        .collect()
}

/// Evaluate one method on every benchmark pair.
pub fn run_benchmark(model: &Backbone, bench: &RotoBenchmark, cfg: &BenchConfig, spec: MethodSpec) -> Result<MatchReport> {
    Ok(run_benchmark_methods(model, bench, cfg, &[spec])?.remove(0))
}

/// Evaluate several methods, sharing the backbone passes between them.
pub fn run_benchmark_methods(
    model: &Backbone,
    bench: &RotoBenchmark,
    cfg: &BenchConfig,
    specs: &[MethodSpec],
) -> Result<Vec<MatchReport>> {
    if cfg.thresholds.is_empty() || cfg.thresholds.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Config(format!("thresholds must be positive, got {:?}", cfg.thresholds)));
    }
    let order = model.config().order;
    let pyr = cfg.pyramid.as_ref();
    let sources = parallel_map(bench.sources.len(), cfg.threads, |i| {
        let img = &bench.sources[i];
        Ok((FeaturePyramid::compute(model, img, pyr)?, detect(img, cfg, None)))
    })?;
    let nt = cfg.thresholds.len();
    let per_pair: Vec<Vec<PairResult>> = parallel_map(bench.pairs.len(), cfg.threads, |id| {
        let pair = &bench.pairs[id];
        let (fa, kp_a) = &sources[pair.source];
        let fb = FeaturePyramid::compute(model, &pair.target, pyr)?;
        let kp_b: Vec<(f64, f64)> = match cfg.protocol {
            Protocol::Gt => kp_a
                .iter()
                .map(|&(x, y)| pair.h.project(x, y).unwrap_or((f64::NAN, f64::NAN)))
                .collect(),
            Protocol::Pred => detect(&pair.target, cfg, Some(&pair.mask)),
        };
        let delta = quantize_shift(pair.angle, order);
        let seed = cfg.ransac.seed.wrapping_add(id as u64);
        specs
            .iter()
            .map(|spec| {
                let da = fa.extract(kp_a, spec.method, &spec.orientation_for(kp_a.len(), 0))?;
                let db = fb.extract(&kp_b, spec.method, &spec.orientation_for(kp_b.len(), delta))?;
                let matches = mutual_nn_match(&da.descriptors, &db.descriptors)?;
                let m = mma(&matches, kp_a, &kp_b, &pair.h, &cfg.thresholds);
                let rc = RansacConfig { seed, ..cfg.ransac.clone() };
                let hest = hestimation(&matches, kp_a, &kp_b, &pair.h, pair.target.width(), pair.target.height(), &rc);
                Ok(PairResult {
                    id,
                    source: pair.source,
                    angle: pair.angle,
                    keypoints_a: kp_a.len(),
                    keypoints_b: kp_b.len(),
                    predicted: m.predicted,
                    correct: m.correct,
                    mma: m.mma,
                    matches,
                    hest,
                    ransac_seed: seed,
                })
            })
            .collect()
    })?;
    Ok(specs
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let pairs: Vec<PairResult> = per_pair.iter().map(|v| v[k].clone()).collect();
            MatchReport {
                method: spec.name(),
                protocol: cfg.protocol,
                thresholds: cfg.thresholds.clone(),
                ransac_seed: cfg.ransac.seed,
                summary: summarize(&pairs, nt),
                curve: curve(&pairs, &bench.angles, nt),
                pairs,
            }
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub consistent: usize,
    pub total: usize,
    pub rate: f64,
}

/// Angular distance in degrees on the circle.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Share of keypoint pairs whose dominant orientations differ by the
/// ground-truth rotation to within `threshold` degrees.
pub fn orientation_consistency(model: &Backbone, pairs: &[TrainingPair], threshold: f64) -> Result<ConsistencyReport> {
    let mut r = ConsistencyReport::default();
    for p in pairs {
        let (fa, fb) = (model.forward(&p.source)?, model.forward(&p.target)?);
        for (i, (&(xa, ya), &(xb, yb))) in p.kps_a.iter().zip(&p.kps_b).enumerate() {
            let (Ok(ka), Ok(kb)) = (keypoint_feature(&fa, xa, ya, i as u32), keypoint_feature(&fb, xb, yb, i as u32)) else {
                continue;
            };
            let ta = dominant_orientation(ka.histogram()).theta;
            let tb = dominant_orientation(kb.histogram()).theta;
            r.total += 1;
            if angle_diff(tb - ta, p.theta) <= threshold {
                r.consistent += 1;
            }
        }
    }
    r.rate = if r.total == 0 { 0.0 } else { r.consistent as f64 / r.total as f64 };
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::texture;
    use crate::eqnn::BackboneConfig;
    use crate::matcheval::roto::build_roto_benchmark;

    fn model() -> Backbone {
        Backbone::new(BackboneConfig {
            widths: vec![4, 8],
            strides: vec![2, 1],
            pyramid: vec![1, 2],
            ..BackboneConfig::desk()
        })
        .unwrap()
    }

    #[test]
    fn quarter_turns_with_gt_shift_are_exact() {
        let bench = build_roto_benchmark(vec![texture::mixed(48, 48, 3)], &[0.0, 90.0, 180.0, 270.0]).unwrap();
        let cfg = BenchConfig {
            thresholds: vec![1.0, 3.0],
            ..Default::default()
        };
        let r = run_benchmark(&model(), &bench, &cfg, MethodSpec::align_gt()).unwrap();
        assert!(r.pairs.iter().all(|p| p.predicted > 4));
        assert_eq!(r.summary.mma, vec![1.0, 1.0]);
        assert_eq!(r.summary.hest_rate, 1.0);
        assert_eq!(r.curve_spread(1.0), Some(0.0));
    }

    #[test]
    fn threads_do_not_change_results_and_csv_has_one_row_per_pair() {
        let bench = build_roto_benchmark(vec![texture::mixed(40, 40, 1)], &[0.0, 30.0, 60.0]).unwrap();
        let cfg = BenchConfig::default();
        let specs = [MethodSpec::new(Method::Align), MethodSpec::new(Method::None)];
        let a = run_benchmark_methods(&model(), &bench, &cfg, &specs).unwrap();
        let b = run_benchmark_methods(&model(), &bench, &BenchConfig { threads: 3, ..cfg }, &specs).unwrap();
        assert_eq!(a[1].summary_json(), b[1].summary_json());
        let mut csv = Vec::new();
        a[0].write_pairs_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("pair,source,angle,pred,correct@3,correct@5,correct@10,hest_pass,corner_err"));
    }

    #[test]
    fn angle_distance_wraps() {
        assert_eq!(angle_diff(350.0, 10.0), 20.0);
        assert_eq!(angle_diff(-90.0, 270.0), 0.0);
    }
}
