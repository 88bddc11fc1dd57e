use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("volume too shallow: depth {depth} cannot lose {trim} slices at each end")]
    TooShallow { depth: usize, trim: usize },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("run directory {} already exists (pass --force to overwrite)", .0.display())]
    RunExists(PathBuf),

    #[error(transparent)]
    Nifti(#[from] nifti::NiftiError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}

impl Error {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::MissingFile(_) | Error::Io { .. } => "io",
            Error::Shape(_) | Error::TooShallow { .. } | Error::OutOfRange(_) | Error::InvalidData(_) => "data",
            Error::CheckpointVersion { .. } | Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite(_) => "non_finite",
            Error::RunExists(_) => "run_exists",
            Error::Json(_) => "config",
            Error::Nifti(_) | Error::Image(_) => "io",
            Error::Tensor(_) => "internal",
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> u8 {
        match self.kind() {
            "config" => 3,
            "io" => 4,
            "data" => 5,
            "checkpoint" => 6,
            "non_finite" => 7,
            "run_exists" => 8,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
