//! Voice activity detection with multiple receptive-field attention.
//!
//! The pipeline runs waveform → log-mel features → per-branch gated affine
//! units over context windows of different widths → channel attention over
//! the branches → two-layer bidirectional LSTM → per-frame speech
//! probability. Training, synthetic corpus construction and F1/DCF scoring
//! live alongside the model.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod frontend;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod wav;

pub use corpus::{LabeledUtterance, MixSpec};
pub use error::{Error, Result};
pub use frontend::{FeatureSequence, FrontendConfig, Waveform};
pub use metrics::EvalReport;
pub use model::{MlnetParams, ModelConfig, Variant};
pub use train::TrainConfig;
