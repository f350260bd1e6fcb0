//! ECG digital-twin pipeline: synthetic corpus with ground-truth disease
//! segments, text-guided feature separation with a learnable codebook,
//! style-conditioned decoding, adversarial training, and the full
//! fidelity/utility/privacy evaluation suite.
//!
//! Everything is deterministic for a fixed seed: corpus bytes, training
//! checkpoints, and metric reports are bitwise reproducible.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod text;
pub mod trainer;

pub use config::{AdvLossForm, Config, Dims};
pub use data::record::{EcgRecord, Label};
pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Working precision for training and inference.
pub type F = f32;
