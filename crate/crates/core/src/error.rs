use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no voiced frames in contour")]
    NoVoicedFrames,

    #[error("degenerate F0 statistics: {0}")]
    DegenerateStats(String),

    #[error("content encoder unavailable: {0}")]
    EncoderUnavailable(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown speaker `{0}`")]
    UnknownSpeaker(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag, used by the CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Wav(_) => "wav",
            Error::EmptyInput(_) => "empty_input",
            Error::Config(_) => "config",
            Error::NoVoicedFrames => "no_voiced_frames",
            Error::DegenerateStats(_) => "degenerate_stats",
            Error::EncoderUnavailable(_) => "encoder_unavailable",
            Error::Contract(_) => "contract",
            Error::UnknownSpeaker(_) => "unknown_speaker",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Format(_) => "format",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Tensor(_) => "tensor",
            Error::Serde(_) => "serde",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
