use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid label {value} at ({x}, {y}): palette has {classes} classes")]
    InvalidLabel {
        value: u8,
        x: usize,
        y: usize,
        classes: usize,
    },
    #[error("invalid palette: {0}")]
    Palette(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("alignment error: image is {image:?} but labels are {label:?}")]
    Alignment {
        image: (usize, usize),
        label: (usize, usize),
    },
    #[error("stain matrix error: {0}")]
    StainMatrix(String),
    #[error("degenerate histogram: {0}")]
    DegenerateHistogram(String),
    #[error("patch size {size} exceeds image {width}x{height}")]
    PatchTooLarge {
        size: usize,
        width: usize,
        height: usize,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("undefined kappa: {0}")]
    UndefinedKappa(String),
    #[error("empty set: {0}")]
    EmptySet(String),
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: u64, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("png error: {0}")]
    Png(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
