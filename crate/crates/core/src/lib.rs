//! Emotion-aware multimodal fusion for meme classification over precomputed
//! embedding bundles: gated fusion of image and emotion patches, gated
//! cross-attention with text tokens, a pooled classification head, and the
//! training, evaluation and interpretability tooling around them.

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gca;
pub mod gmf;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use gca::ScoreMode;
pub use graph::{Graph, Var};
pub use head::{LossKind, OlsState};
pub use model::{ModelParams, ModelSpec, VariantKind};
pub use params::Parameters;
pub use tensor::Tensor;
pub use train::{evaluate, fit, TrainConfig};
