//! ECG record storage, preprocessing, synthetic corpus generation, and
//! manifest handling.

pub mod corpus;
pub mod preprocess;
pub mod record;
pub mod synth;
