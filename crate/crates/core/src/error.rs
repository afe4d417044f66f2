use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("RoI {roi} out of bounds for {height}x{width} feature map")]
    RoiOutOfBounds {
        roi: String,
        height: usize,
        width: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("class index {class} out of range for {num_classes} classes (including background)")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("parse error in {source_name} line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("training diverged at iteration {iter}: {message}")]
    Diverged { iter: usize, message: String },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
