//! Minimal dense-tensor numeric core with reverse-mode differentiation.
//!
//! Provides exactly what the policy and its optimizer need: matrix multiply,
//! broadcast adds, tanh/ReLU, masked (log-)softmax, layer normalization,
//! masked mean pooling, slicing/concatenation, scalar reductions, a named
//! parameter registry with Adam and global-norm clipping, and a binary
//! checkpoint format. Double precision throughout.

mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use params::{gaussian, xavier_uniform, AdamConfig, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("shape error: {0}")]
    Shape(String),
    /// API misuse by the caller (non-scalar loss, unknown parameter, ...).
    #[error("contract error: {0}")]
    Contract(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("non-finite gradient in parameter {param:?}")]
    NonFinite { param: String },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}
