use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use super::harris::{detect_harris, HarrisParams};
use super::homography::{decompose_rotation, sample_homography, Homography, HomographyRanges};
use super::photometric::{photometric_jitter, JitterConfig};
use super::warp::{warp_from, Mask};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::gtensor::{read_dump, write_dump, GroupDims, GroupTensor, ScalarImage};

#[derive(Clone, Debug, PartialEq)]
pub struct PairConfig {
    /// Square crop side (even).
    pub crop: usize,
    /// Keypoint pairs per training pair.
    pub keypoints: usize,
    /// Fewer surviving pairs than this is an error.
    pub min_keypoints: usize,
    pub ranges: HomographyRanges,
    pub jitter: JitterConfig,
    /// Also jitter the source image.
    pub jitter_source: bool,
    pub harris: HarrisParams,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            crop: 64,
            keypoints: 64,
            min_keypoints: 16,
            ranges: HomographyRanges::default(),
            jitter: JitterConfig::default(),
            jitter_source: false,
            // a 64×64 crop holds only ~15 radius-4 maxima inside the margin
            harris: HarrisParams {
                nms_radius: 2,
                ..HarrisParams::default()
            },
        }
    }
}

impl PairConfig {
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        let pair2 = |v: Option<Vec<f64>>, dflt: (f64, f64), key: &str| -> Result<(f64, f64)> {
            match v.as_deref() {
                None => Ok(dflt),
                Some([a, b]) => Ok((*a, *b)),
                Some(other) => Err(Error::Config(format!("{key} needs two values, got {other:?}"))),
            }
        };
        let ranges = HomographyRanges {
            rotation: pair2(kv.take_list("rotation_range")?, d.ranges.rotation, "rotation_range")?,
            scale: pair2(kv.take_list("scale_range")?, d.ranges.scale, "scale_range")?,
            translation: kv.take_or("translation", d.ranges.translation)?,
            perspective: kv.take_or("perspective", d.ranges.perspective)?,
        };
        ranges.validate()?;
        let jitter = JitterConfig {
            brightness: kv.take_or("jitter_brightness", d.jitter.brightness)?,
            contrast: kv.take_or("jitter_contrast", d.jitter.contrast)?,
            noise: kv.take_or("jitter_noise", d.jitter.noise)?,
            blur: kv.take_or("jitter_blur", d.jitter.blur)?,
        };
        let harris = HarrisParams {
            nms_radius: kv.take_or("harris_nms_radius", d.harris.nms_radius)?,
            margin: kv.take_or("harris_margin", d.harris.margin)?,
            ..d.harris
        };
        let cfg = Self {
            crop: kv.take_or("crop", d.crop)?,
            keypoints: kv.take_or("keypoints", d.keypoints)?,
            min_keypoints: kv.take_or("min_keypoints", d.min_keypoints)?,
            ranges,
            jitter,
            jitter_source: kv.take_or("jitter_source", d.jitter_source)?,
            harris,
        };
        if cfg.crop == 0 || !cfg.crop.is_multiple_of(2) {
            return Err(Error::Config(format!("crop must be even and positive, got {}", cfg.crop)));
        }
        if cfg.keypoints < 2 || cfg.min_keypoints < 2 || cfg.min_keypoints > cfg.keypoints {
            return Err(Error::Config(format!(
                "need 2 <= min_keypoints <= keypoints, got {} and {}",
                cfg.min_keypoints, cfg.keypoints
            )));
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let r = &self.ranges;
        let j = &self.jitter;
        format!(
            "crop={}\nkeypoints={}\nmin_keypoints={}\nrotation_range={},{}\nscale_range={},{}\n\
             translation={}\nperspective={}\njitter_brightness={}\njitter_contrast={}\njitter_noise={}\n\
             jitter_blur={}\njitter_source={}\nharris_nms_radius={}\nharris_margin={}\n",
            self.crop,
            self.keypoints,
            self.min_keypoints,
            r.rotation.0,
            r.rotation.1,
            r.scale.0,
            r.scale.1,
            r.translation,
            r.perspective,
            j.brightness,
            j.contrast,
            j.noise,
            j.blur,
            self.jitter_source,
            self.harris.nms_radius,
            self.harris.margin
        )
    }
}

/// Source crop, warped target and projected keypoint correspondences.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub source: ScalarImage,
    pub target: ScalarImage,
    pub h: Homography,
    pub theta: f64,
    /// Source keypoints `(x, y)`.
    pub kps_a: Vec<(f64, f64)>,
    /// `kps_b[i] = H · kps_a[i]`.
    pub kps_b: Vec<(f64, f64)>,
    pub mask: Mask,
}

/// Sample `H`, warp, jitter, detect on the source and project into the target.
pub fn make_pair(img: &ScalarImage, rng: &mut impl Rng, cfg: &PairConfig) -> Result<TrainingPair> {
    let c = cfg.crop;
    if img.height() < c || img.width() < c {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} smaller than crop {c}",
            img.height(),
            img.width()
        )));
    }
    let y0 = rng.random_range(0..=img.height() - c);
    let x0 = rng.random_range(0..=img.width() - c);
    let h = sample_homography(rng, &cfg.ranges, c, c)?;
    let clean = img.crop(y0, x0, c, c);
    let (warped, mask) = warp_from(img, (x0 as f64, y0 as f64), &h, c, c)?;
    let target = photometric_jitter(&warped, rng, &cfg.jitter);
    let source = if cfg.jitter_source {
        photometric_jitter(&clean, rng, &cfg.jitter)
    } else {
        clean
    };
    let margin = cfg.harris.margin as f64;
    let lim = (c - 1) as f64 - margin;
    let mut kps_a = Vec::new();
    let mut kps_b = Vec::new();
    for kp in detect_harris(&source, usize::MAX, &cfg.harris, None) {
        if kps_a.len() == cfg.keypoints {
            break;
        }
        let Some((bx, by)) = h.project(kp.x, kp.y) else { continue };
        if bx < margin || by < margin || bx > lim || by > lim || !mask.covers(bx, by) {
            continue;
        }
        kps_a.push((kp.x, kp.y));
        kps_b.push((bx, by));
    }
    if kps_a.len() < cfg.min_keypoints {
        return Err(Error::TooFewKeypoints {
            found: kps_a.len(),
            required: cfg.min_keypoints,
        });
    }
    Ok(TrainingPair {
        source,
        target,
        theta: decompose_rotation(&h)?,
        h,
        kps_a,
        kps_b,
        mask,
    })
}

/// One line of a pair-cache index: `src seed theta K`.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub source: String,
    pub seed: u64,
    pub theta: f64,
    pub keypoints: usize,
}

const INDEX: &str = "index.txt";

fn image_dump(img: &ScalarImage) -> GroupTensor {
    GroupTensor::new(
        GroupDims::new(1, 1, img.height(), img.width()).expect("non-empty"),
        img.data().to_vec(),
    )
    .expect("dims match")
}

fn write_file(path: &Path, t: &GroupTensor) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_dump(&mut f, t)?;
    f.flush()?;
    Ok(())
}

fn read_file(path: &Path) -> Result<GroupTensor> {
    read_dump(&mut BufReader::new(File::open(path)?))
}

/// Store pairs as tensor dumps plus a plain-text index.
///
/// Pair `i` is `pair{i}.{src,tgt,geo}.gt01`; `geo` holds the nine entries of
/// `H` followed by the `K` keypoint pairs `(xa, ya, xb, yb)`.
pub fn write_pair_cache(dir: &Path, pairs: &[(CacheEntry, TrainingPair)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = String::new();
    for (i, (entry, p)) in pairs.iter().enumerate() {
        if entry.source.contains(char::is_whitespace) {
            return Err(Error::Config(format!("source name `{}` contains whitespace", entry.source)));
        }
        index.push_str(&format!("{} {} {} {}\n", entry.source, entry.seed, entry.theta, p.kps_a.len()));
        write_file(&dir.join(format!("pair{i}.src.gt01")), &image_dump(&p.source))?;
        write_file(&dir.join(format!("pair{i}.tgt.gt01")), &image_dump(&p.target))?;
        let mut geo: Vec<f32> = p.h.to_rows().iter().map(|v| *v as f32).collect();
        for (a, b) in p.kps_a.iter().zip(&p.kps_b) {
            geo.extend([a.0 as f32, a.1 as f32, b.0 as f32, b.1 as f32]);
        }
        let n = geo.len();
        write_file(
            &dir.join(format!("pair{i}.geo.gt01")),
            &GroupTensor::new(GroupDims::new(1, 1, 1, n)?, geo)?,
        )?;
    }
    std::fs::write(dir.join(INDEX), index)?;
    Ok(())
}

pub fn read_pair_cache(dir: &Path) -> Result<Vec<(CacheEntry, TrainingPair)>> {
    let text = std::fs::read_to_string(dir.join(INDEX))?;
    let bad = |msg: String| Error::Format { what: "pair index", msg };
    let mut out = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let [src, seed, theta, k] = f[..] else {
            return Err(bad(format!("line {}: expected 4 fields", i + 1)));
        };
        let parse_err = |e: &dyn std::fmt::Display| bad(format!("line {}: {e}", i + 1));
        let entry = CacheEntry {
            source: src.to_string(),
            seed: seed.parse().map_err(|e| parse_err(&e))?,
            theta: theta.parse().map_err(|e| parse_err(&e))?,
            keypoints: k.parse().map_err(|e| parse_err(&e))?,
        };
        let to_img = |t: GroupTensor| {
            let d = t.dims();
            ScalarImage::new(d.height, d.width, t.into_data())
        };
        let source = to_img(read_file(&dir.join(format!("pair{i}.src.gt01")))?)?;
        let target = to_img(read_file(&dir.join(format!("pair{i}.tgt.gt01")))?)?;
        let geo = read_file(&dir.join(format!("pair{i}.geo.gt01")))?.into_data();
        if geo.len() != 9 + 4 * entry.keypoints {
            return Err(bad(format!("pair {i}: geometry holds {} values", geo.len())));
        }
        let mut rows = [0.0; 9];
        rows.iter_mut().zip(&geo).for_each(|(r, g)| *r = *g as f64);
        let h = Homography::from_rows(rows)?;
        let kp = geo[9..].chunks_exact(4);
        let kps_a = kp.clone().map(|c| (c[0] as f64, c[1] as f64)).collect();
        let kps_b = kp.map(|c| (c[2] as f64, c[3] as f64)).collect();
        let mask = Mask::full(target.height(), target.width());
        out.push((
            entry.clone(),
            TrainingPair {
                source,
                target,
                h,
                theta: entry.theta,
                kps_a,
                kps_b,
                mask,
            },
        ));
    }
    Ok(out)
}
