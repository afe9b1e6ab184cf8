//! Inference-time matching and the rotation benchmark.

mod bench;
mod matching;
mod pyramid;
mod ransac;
mod roto;

pub use bench::{
    angle_diff, orientation_consistency, run_benchmark, run_benchmark_methods, AnglePoint, BenchConfig,
    ConsistencyReport, MatchReport, MethodSpec, OrientationMode, PairResult, Protocol, Summary,
};
pub use matching::{mma, mutual_nn_match, mutual_nn_rows, reprojection_error, similarity_matrix, Match, MmaResult};
pub use pyramid::{pyramid_descriptors, FeaturePyramid, ScalePyramidConfig};
pub use ransac::{corner_error, fit_homography, hestimation, ransac_homography, HEstimation, RansacConfig, RansacFit};
pub use roto::{build_roto_benchmark, roto_angles, RotoBenchmark, RotoPair};
