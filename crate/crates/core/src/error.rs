use thiserror::Error;

/// Errors produced by the localization engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("image too small: {width}x{height} (minimum {min}x{min})")]
    ImageTooSmall { width: u32, height: u32, min: u32 },

    #[error("sample ({u}, {v}) outside level bounds {width}x{height}")]
    OutOfRange {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },

    #[error("format error in {field}: {reason}")]
    Format { field: String, reason: String },

    #[error("selection error: {0}")]
    Selection(String),

    #[error("map build error at level s={scale}: {reason}")]
    MapBuild { scale: u8, reason: String },

    #[error("map query error: {0}")]
    Query(String),

    #[error("matching error: {0}")]
    Matching(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn in_frame(self, index: usize) -> Self {
        Error::Frame {
            index,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
