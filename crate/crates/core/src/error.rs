use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the splatting library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite {class} gradient for gaussian {index}")]
    NonFiniteGradient { index: usize, class: ParamClass },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed manifest {}: {msg}", .path.display())]
    MalformedManifest { path: PathBuf, msg: String },

    #[error("resolution mismatch for {}: camera expects {expected:?}, image is {found:?}", .path.display())]
    ResolutionMismatch {
        path: PathBuf,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

/// The learnable parameter groups of a Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamClass {
    Center,
    LogScale,
    Rotation,
    OpacityLogit,
    ShCoeffs,
}

impl ParamClass {
    pub const ALL: [ParamClass; 5] = [
        ParamClass::Center,
        ParamClass::LogScale,
        ParamClass::Rotation,
        ParamClass::OpacityLogit,
        ParamClass::ShCoeffs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Center => "center",
            ParamClass::LogScale => "log_scale",
            ParamClass::Rotation => "rotation",
            ParamClass::OpacityLogit => "opacity_logit",
            ParamClass::ShCoeffs => "sh_coeffs",
        }
    }
}

impl std::fmt::Display for ParamClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
