//! Batching, time masking and the labelled/unlabelled batch sampler.

mod batch;
mod mask;
mod sampler;

pub use batch::{make_batches, Batch};
pub use mask::{apply_mask, plan_masks, MaskPlan, MaskPolicy};
pub use sampler::{sample_batch_kind, BatchStreams, SamplerConfig};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchKind {
    Labelled,
    Unlabelled,
}

impl BatchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BatchKind::Labelled => "labelled",
            BatchKind::Unlabelled => "unlabelled",
        }
    }
}
