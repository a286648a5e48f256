use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("unsupported audio: {0}")]
    UnsupportedAudio(String),
    #[error("zero-length audio")]
    EmptyAudio,
    #[error("all-silent input")]
    AllSilent,
    #[error("clip of {len} samples is shorter than one {win}-sample window")]
    TooShort { len: usize, win: usize },
    #[error("sample rate {found} Hz does not match configured {expected} Hz")]
    SampleRate { expected: u32, found: u32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite loss at step {step} ({detail})")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("unsupported checkpoint format version {0}")]
    CheckpointVersion(u32),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    #[error("unknown speaker `{0}`")]
    UnknownSpeaker(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Autograd(#[from] clvc_autograd::AutogradError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
