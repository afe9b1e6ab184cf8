//! Training-pair synthesis: homographies, warping, photometric jitter,
//! Harris keypoints and correspondence generation.

mod harris;
mod homography;
mod io;
mod pair;
mod photometric;
pub mod texture;
mod warp;

pub use harris::{detect_harris, harris_keypoints, harris_response, HarrisParams, Keypoint};
pub use homography::{decompose_rotation, sample_homography, Homography, HomographyRanges};
pub use io::{list_corpus, load_corpus, load_image, save_pgm};
pub use pair::{make_pair, read_pair_cache, write_pair_cache, CacheEntry, PairConfig, TrainingPair};
pub use photometric::{adjust, gaussian_blur, photometric_jitter, JitterConfig};
pub use warp::{psnr, warp_from, warp_image, Mask};
