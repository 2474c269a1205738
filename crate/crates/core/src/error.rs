use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("frame {index} is {actual_width}x{actual_height}, expected {width}x{height}")]
    DimensionMismatch {
        index: usize,
        width: usize,
        height: usize,
        actual_width: usize,
        actual_height: usize,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing metadata file {0}")]
    MissingMetadata(PathBuf),

    #[error("missing frame {index} ({path})")]
    MissingFrame { index: usize, path: PathBuf },

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("sequence contains no frames")]
    EmptySequence,

    #[error("sequence too short: {available} frames remain, at least {required} required")]
    TooShort { available: i64, required: usize },

    #[error("degenerate intensity trace: all frames have mean {0}")]
    DegenerateTrace(f64),

    #[error("insufficient peaks: found {found}, need {needed}")]
    InsufficientPeaks { found: usize, needed: usize },

    #[error("degenerate frame{}: zero intensity variance or mean", fmt_index(.index))]
    DegenerateFrame { index: Option<usize> },

    #[error("region {width}x{height} is smaller than the {min}x{min} feature grid")]
    RegionTooSmall { width: usize, height: usize, min: usize },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("stage `{stage}` failed for sequence `{sequence}`: {source}")]
    Stage {
        stage: &'static str,
        sequence: String,
        #[source]
        source: Box<Error>,
    },
}

fn fmt_index(index: &Option<usize>) -> String {
    match index {
        Some(i) => format!(" at index {i}"),
        None => String::new(),
    }
}

impl Error {
    /// `true` for errors caused by bad inputs or configuration rather than
    /// by the data failing analysis.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidArgument(_)
            | Error::DimensionMismatch { .. }
            | Error::MissingMetadata(_)
            | Error::MissingFrame { .. }
            | Error::MalformedFile { .. }
            | Error::EmptySequence
            | Error::TooShort { .. }
            | Error::RegionTooSmall { .. }
            | Error::Io { .. }
            | Error::Json { .. }
            | Error::Csv { .. } => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn stage(stage: &'static str, sequence: impl Into<String>, source: Error) -> Self {
        Error::Stage {
            stage,
            sequence: sequence.into(),
            source: Box::new(source),
        }
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg()))
    }
}
