use std::path::PathBuf;

/// Errors produced anywhere in the feature pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("spatial grid must be square, got {h}x{w}")]
    NonSquare { h: usize, w: usize },

    #[error("sample location ({y}, {x}) outside a {h}x{w} grid")]
    OutOfBounds { y: f64, x: f64, h: usize, w: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cannot L2-normalize a zero vector")]
    ZeroVector,

    #[error("row {row} has norm {norm}, expected unit norm")]
    NotNormalized { row: usize, norm: f64 },

    #[error("descriptor dimensions differ: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },

    #[error("unregistered primitive `{0}`")]
    UnregisteredPrimitive(String),

    #[error("degenerate homography: {0}")]
    Degenerate(String),

    #[error("rotation undefined: H11 = H21 = 0")]
    UndefinedRotation,

    #[error("only {found} keypoints available, {required} required")]
    TooFewKeypoints { found: usize, required: usize },

    #[error("{found} matches, at least 4 needed for a homography")]
    TooFewMatches { found: usize },

    #[error("corpus at {0} contains no images")]
    EmptyCorpus(PathBuf),

    #[error("non-finite loss at iteration {iteration}: ori={ori}, desc={desc}")]
    NonFiniteLoss { iteration: usize, ori: f64, desc: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("image decode failed for {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
