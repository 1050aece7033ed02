use std::path::{Path, PathBuf};

/// Errors raised across the inpainting pipeline.
///
/// Variants are grouped by how a caller is expected to react: configuration
/// and argument errors are usage problems, data and geometry errors point at
/// inputs, numerical errors at the math.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn image(path: impl AsRef<Path>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Process exit status for this error: 2 usage, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Data(_)
            | Error::Geometry(_)
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Json(_) => 3,
            Error::Numerical(_) | Error::Tensor(_) => 4,
        }
    }
}

pub(crate) fn ensure_finite(t: &candle_core::Tensor, what: &str) -> Result<()> {
    // x - x is NaN exactly when x is inf or NaN.
    let probe = (t - t)?
        .sum_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?;
    if probe.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite values in {what}")))
    }
}
