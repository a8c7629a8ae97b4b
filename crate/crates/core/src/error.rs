use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("undefined mean: {0}")]
    UndefinedMean(String),
    #[error("data error: {0}")]
    Data(String),
    /// A dataset or split with nothing in it.
    #[error("empty: {0}")]
    Empty(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (parameter L2 norm {param_norm:.6e}, largest tensor norm {worst_tensor} = {worst_norm:.6e})"
    )]
    NonFiniteLoss { epoch: usize, batch: usize, param_norm: f64, worst_tensor: String, worst_norm: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
