use std::path::PathBuf;

use crate::checkpoint::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid image size {size}: {reason}")]
    InvalidSize { size: usize, reason: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("ground-truth mask is not binary (found value {0})")]
    NonBinaryMask(f64),
    #[error("ground-truth mask has no foreground pixel; metric undefined")]
    EmptyGroundTruth,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("orphan stem {stem:?}: missing {missing}/ counterpart")]
    OrphanStem { stem: String, missing: &'static str },
    #[error("size mismatch within stem {stem:?}: {detail}")]
    StemSizeMismatch { stem: String, detail: String },
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("training diverged at step {step} (non-finite loss)")]
    Diverged { step: usize, last: Box<Checkpoint> },
    #[error("checkpoint does not match model configuration: {0}")]
    CheckpointMismatch(String),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
    #[error("model was built without MGU gating; gate statistics unavailable")]
    GatingDisabled,
    #[error("unknown preset {name:?}; valid presets: {valid}")]
    UnknownPreset { name: String, valid: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
