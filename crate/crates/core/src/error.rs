use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid crystal address: ring {ring}, crystal {crystal}")]
    InvalidAddress { ring: usize, crystal: usize },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid voxel grid: {0}")]
    InvalidGrid(String),

    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate line of response: endpoints coincide")]
    DegenerateLor,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("incompatible grids: {0}")]
    IncompatibleGrid(String),

    #[error("invalid crystal efficiency: {0}")]
    InvalidEfficiency(String),

    #[error("region of interest contains no voxels")]
    EmptyRoi,

    #[error("segment outside the volume grid")]
    OutOfGrid,

    #[error("profile has no half-maximum crossing on {side} side")]
    NotMeasurable { side: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step}: {reason}")]
    TrainingDiverged { step: usize, reason: String },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("graph contract violation: {0}")]
    GraphContract(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
