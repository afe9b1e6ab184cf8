//! Group aligning and the pooling baselines.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gtensor::GroupTensor;
use crate::orientation::{candidate_orientations, dominant_orientation, DEFAULT_K_MAX, DEFAULT_RATIO};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Align,
    Avg,
    Max,
    None,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Align, Method::Avg, Method::Max, Method::None];

    pub fn name(self) -> &'static str {
        match self {
            Method::Align => "align",
            Method::Avg => "avg",
            Method::Max => "max",
            Method::None => "none",
        }
    }

    /// Output length for `C` channels and order `G`.
    pub fn dim(self, channels: usize, order: usize) -> usize {
        match self {
            Method::Align | Method::None => channels * order,
            Method::Avg | Method::Max => channels,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (align|avg|max|none)")))
    }
}

/// A keypoint's `C × |G|` feature slice, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointFeature {
    pub data: Vec<f32>,
    pub channels: usize,
    pub order: usize,
    pub id: u32,
}

impl KeypointFeature {
    pub fn new(data: Vec<f32>, channels: usize, order: usize, id: u32) -> Result<Self> {
        if channels * order != data.len() || order == 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{order} keypoint feature",
                data.len()
            )));
        }
        Ok(Self {
            data,
            channels,
            order,
            id,
        })
    }

    /// The orientation histogram `o`: channel 0 over the group.
    pub fn histogram(&self) -> &[f32] {
        &self.data[..self.order]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub data: Vec<f32>,
    pub method: Method,
    /// Shift used for `align`.
    pub delta: Option<usize>,
    pub keypoint: u32,
}

fn normalize(mut v: Vec<f32>) -> Result<Vec<f32>> {
    let n = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    Ok(v)
}

/// `d'[G·c + i] = p[c, (i + Δ) mod G]`, then `d = d' / ‖d'‖`.
pub fn group_align(p: &KeypointFeature, delta: usize) -> Result<Descriptor> {
    let g = p.order;
    if delta >= g {
        return Err(Error::ShapeMismatch(format!("shift {delta} outside 0..{g}")));
    }
    let mut d = Vec::with_capacity(p.data.len());
    for row in p.data.chunks_exact(g) {
        d.extend((0..g).map(|i| row[(i + delta) % g]));
    }
    Ok(Descriptor {
        data: normalize(d)?,
        method: Method::Align,
        delta: Some(delta),
        keypoint: p.id,
    })
}

/// `avg`/`max` collapse the group axis, `none` flattens unshifted.
pub fn group_pool(p: &KeypointFeature, method: Method) -> Result<Descriptor> {
    let g = p.order;
    let d = match method {
        Method::Align | Method::None => p.data.clone(),
        Method::Avg => p
            .data
            .chunks_exact(g)
            .map(|r| (r.iter().map(|v| *v as f64).sum::<f64>() / g as f64) as f32)
            .collect(),
        Method::Max => p
            .data
            .chunks_exact(g)
            .map(|r| r.iter().copied().fold(f32::NEG_INFINITY, f32::max))
            .collect(),
    };
    Ok(Descriptor {
        data: normalize(d)?,
        method,
        delta: None,
        keypoint: p.id,
    })
}

/// Where `align` takes its shifts from.
#[derive(Clone, Debug, PartialEq)]
pub enum Orientation {
    /// Argmax of the keypoint's own histogram.
    Dominant,
    /// Every bin passing the ratio rule.
    Candidates { ratio: f64, k_max: usize },
    /// Caller-supplied shift per keypoint.
    Given(Vec<usize>),
}

impl Orientation {
    pub fn default_candidates() -> Self {
        Orientation::Candidates {
            ratio: DEFAULT_RATIO,
            k_max: DEFAULT_K_MAX,
        }
    }
}

/// Image pixel coordinate to feature-map coordinate at stride 2.
///
/// Pixel `u` has its center at `u`; feature cell `j` averages pixels `2j`
/// and `2j + 1`, so it sits at `2j + 0.5`.
pub fn feature_coord(u: f64) -> f64 {
    (u - 0.5) / 2.0
}

/// Sample `F` at an image-frame keypoint `(x, y)`.
pub fn keypoint_feature(f: &GroupTensor, x: f64, y: f64, id: u32) -> Result<KeypointFeature> {
    let d = f.dims();
    let clamp = |v: f64, n: usize| {
        if v >= -0.5 && v <= n as f64 - 0.5 {
            Some(v.clamp(0.0, (n - 1) as f64))
        } else {
            None
        }
    };
    let (fy, fx) = (feature_coord(y), feature_coord(x));
    let (Some(cy), Some(cx)) = (clamp(fy, d.height), clamp(fx, d.width)) else {
        return Err(Error::OutOfBounds {
            y: fy,
            x: fx,
            h: d.height,
            w: d.width,
        });
    };
    KeypointFeature::new(f.bilinear_sample(cy, cx)?, d.channels, d.order, id)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Extraction {
    pub descriptors: Vec<Descriptor>,
    pub out_of_bounds: usize,
    pub zero_vectors: usize,
}

/// Descriptors for `keypoints` (image-frame `(x, y)`, ids are their indices).
/// Failing keypoints are skipped and counted.
pub fn extract_descriptors(
    f: &GroupTensor,
    keypoints: &[(f64, f64)],
    method: Method,
    orientation: &Orientation,
) -> Result<Extraction> {
    if let Orientation::Given(d) = orientation {
        if d.len() != keypoints.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} shifts for {} keypoints",
                d.len(),
                keypoints.len()
            )));
        }
    }
    let mut out = Extraction::default();
    for (i, &(x, y)) in keypoints.iter().enumerate() {
        let p = match keypoint_feature(f, x, y, i as u32) {
            Ok(p) => p,
            Err(Error::OutOfBounds { .. }) => {
                out.out_of_bounds += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let produced: Vec<Result<Descriptor>> = match method {
            Method::Align => {
                let deltas: Vec<usize> = match orientation {
                    Orientation::Dominant => vec![dominant_orientation(p.histogram()).delta],
                    Orientation::Candidates { ratio, k_max } => {
                        candidate_orientations(p.histogram(), *ratio, *k_max)
                            .iter()
                            .map(|e| e.delta)
                            .collect()
                    }
                    Orientation::Given(d) => vec![d[i] % p.order],
                };
                deltas.into_iter().map(|d| group_align(&p, d)).collect()
            }
            m => vec![group_pool(&p, m)],
        };
        for d in produced {
            match d {
                Ok(d) => out.descriptors.push(d),
                Err(Error::ZeroVector) => out.zero_vectors += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"DSC1";

/// Stored `Δ` for descriptors without a shift.
pub const NO_DELTA: u16 = u16::MAX;

/// One stored descriptor with its keypoint location.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorRecord {
    pub keypoint: u32,
    pub x: f32,
    pub y: f32,
    pub delta: u16,
    pub data: Vec<f32>,
}

impl DescriptorRecord {
    pub fn new(d: &Descriptor, keypoints: &[(f64, f64)]) -> Self {
        let (x, y) = keypoints[d.keypoint as usize];
        Self {
            keypoint: d.keypoint,
            x: x as f32,
            y: y as f32,
            delta: d.delta.map_or(NO_DELTA, |v| v as u16),
            data: d.data.clone(),
        }
    }
}

/// `DSC1 | u32 count | u32 dim | count × (u32 id, f32 x, f32 y, u16 Δ, dim × f32)`.
pub fn write_descriptors<W: Write>(out: &mut W, dim: usize, records: &[DescriptorRecord]) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + records.len() * (14 + 4 * dim));
    buf.extend_from_slice(DESCRIPTOR_MAGIC);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in records {
        if r.data.len() != dim {
            return Err(Error::DimMismatch { a: dim, b: r.data.len() });
        }
        buf.extend_from_slice(&r.keypoint.to_le_bytes());
        buf.extend_from_slice(&r.x.to_le_bytes());
        buf.extend_from_slice(&r.y.to_le_bytes());
        buf.extend_from_slice(&r.delta.to_le_bytes());
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Returns `(dim, records)`.
pub fn read_descriptors<R: Read>(input: &mut R) -> Result<(usize, Vec<DescriptorRecord>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let bad = |msg: String| Error::Format {
        what: "descriptor file",
        msg,
    };
    if bytes.len() < 12 || &bytes[..4] != DESCRIPTOR_MAGIC {
        return Err(bad("missing DSC1 header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let (count, dim) = (u32_at(4) as usize, u32_at(8) as usize);
    let rec = 14 + 4 * dim;
    if bytes.len() != 12 + count * rec {
        return Err(bad(format!(
            "{} bytes for {count} records of dim {dim}",
            bytes.len()
        )));
    }
    let records = (0..count)
        .map(|i| {
            let o = 12 + i * rec;
            DescriptorRecord {
                keypoint: u32_at(o),
                x: f32_at(o + 4),
                y: f32_at(o + 8),
                delta: u16::from_le_bytes([bytes[o + 12], bytes[o + 13]]),
                data: (0..dim).map(|k| f32_at(o + 14 + 4 * k)).collect(),
            }
        })
        .collect();
    Ok((dim, records))
}
