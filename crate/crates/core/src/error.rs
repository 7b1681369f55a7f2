use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("projection matrix is rank deficient (smallest singular value ratio {ratio:e})")]
    RankDeficient { ratio: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("camera centers coincide; epipolar geometry is undefined")]
    CoincidentCenters,
    #[error("epipolar line is degenerate (query maps onto the epipole)")]
    DegenerateLine,
    #[error("affine transform is singular (|det A| = {0:e})")]
    SingularAffine(f64),
    #[error("point projects to infinity (|w| < threshold)")]
    AtInfinity,
    #[error("point lies behind the camera")]
    BehindCamera,

    #[error("invalid feature map: {0}")]
    InvalidFeatureMap(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bottleneck fusion requires an even channel count, got {0}")]
    OddChannels(usize),
    #[error("channel mismatch: reference has {reference}, source has {src}")]
    ChannelMismatch { reference: usize, src: usize },
    #[error("problem too large for finite differences: {0} > 1e6")]
    DimsTooLarge(usize),
    #[error("backward called without a recorded forward state")]
    StateMissing,

    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("triangulation is degenerate: {0}")]
    Degenerate(String),
    #[error("RANSAC found no consensus (best inlier count {0})")]
    NoConsensus(usize),

    #[error("joint validity masks differ")]
    MaskMismatch,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("no predictions to select from")]
    Empty,

    #[error("viewing angle must lie in (0, 180) degrees, got {0}")]
    InvalidAngle(f64),
    #[error("could not draw {joints} distinguishable descriptors in {channels} channels")]
    DescriptorSaturation { joints: usize, channels: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
