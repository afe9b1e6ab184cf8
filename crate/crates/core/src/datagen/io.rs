use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};

use crate::error::{Error, Result};
use crate::gtensor::ScalarImage;

const EXTENSIONS: [&str; 3] = ["pgm", "ppm", "pnm"];

/// Decode a binary PGM/PPM (color is converted to luma) into `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ScalarImage> {
    let err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let reader = ImageReader::open(path)?.with_guessed_format()?;
    let img = reader.decode().map_err(|e| err(e.to_string()))?.to_luma8();
    let (w, h) = img.dimensions();
    ScalarImage::new(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
    )
}

/// Write an 8-bit binary PGM.
pub fn save_pgm(path: &Path, img: &ScalarImage) -> Result<()> {
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, img.width() as u32, img.height() as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

/// PGM/PPM files directly inside `dir`, sorted by name.
pub fn list_corpus(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("corpus directory {} does not exist", dir.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyCorpus(dir.to_path_buf()));
    }
    Ok(files)
}

pub fn load_corpus(dir: &Path) -> Result<Vec<ScalarImage>> {
    list_corpus(dir)?.iter().map(|p| load_image(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_and_ppm_luma() {
        let dir = tempfile::tempdir().unwrap();
        let img = ScalarImage::from_fn(5, 7, |y, x| ((y * 7 + x) * 6) as f32 / 255.0);
        let p = dir.path().join("a.pgm");
        save_pgm(&p, &img).unwrap();
        assert!(std::fs::read(&p).unwrap().starts_with(b"P5"));
        let back = load_image(&p).unwrap();
        assert!(back.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-6));

        let mut ppm = b"P6\n2 1\n255\n".to_vec();
        ppm.extend_from_slice(&[255, 255, 255, 0, 0, 0]);
        std::fs::write(dir.path().join("b.ppm"), ppm).unwrap();
        let c = load_image(&dir.path().join("b.ppm")).unwrap();
        assert_eq!(c.data(), &[1.0, 0.0]);
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        assert_eq!(list_corpus(dir.path()).unwrap().len(), 2);
    }

    #[test]
    fn empty_and_missing_corpus() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(list_corpus(dir.path()), Err(Error::EmptyCorpus(_))));
        assert!(matches!(list_corpus(&dir.path().join("nope")), Err(Error::Config(_))));
        std::fs::write(dir.path().join("bad.pgm"), "P5 garbage").unwrap();
        assert!(matches!(load_image(&dir.path().join("bad.pgm")), Err(Error::Image { .. })));
    }
}
