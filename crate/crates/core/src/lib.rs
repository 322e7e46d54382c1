//! Semi-supervised acoustic model finetuning.
//!
//! A small convolutional transformer is trained on a mix of labelled and
//! unlabelled batches. Labelled batches contribute a weighted sum of frame
//! cross-entropy and a masked contrastive loss; unlabelled batches contribute
//! the contrastive loss alone. Each training step draws a labelled batch
//! with probability `p`.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use data::{Batch, BatchKind, MaskPlan, SamplerConfig};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use features::{AudioBuffer, FeatureMatrix, Utterance};
pub use losses::{ContrastiveConfig, LossBreakdown};
pub use model::{ForwardOutput, ModelConfig, ModelParams};
pub use tensor::Mat;
pub use trainer::{TrainConfig, TrainState};
