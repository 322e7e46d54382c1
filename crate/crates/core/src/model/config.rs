use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows consumed by the subsampling convolution per output frame.
pub const SUBSAMPLE_KERNEL: usize = 3;
pub const SUBSAMPLE_STRIDE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_blocks: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Depthwise convolution kernel inside each block (odd).
    pub conv_kernel: usize,
    pub num_classes: usize,
    pub context_dim: usize,
    pub max_rel_dist: usize,
    /// Must be 2; present so configs can state it explicitly.
    pub subsample_stride: usize,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Full-size model: 18 blocks of width 624 with 8 heads.
    pub fn paper() -> Self {
        ModelConfig {
            input_dim: 160,
            num_blocks: 18,
            model_dim: 624,
            num_heads: 8,
            ffn_dim: 2048,
            conv_kernel: 3,
            num_classes: 4000,
            context_dim: 312,
            max_rel_dist: 64,
            subsample_stride: SUBSAMPLE_STRIDE,
            dropout: 0.0,
            init_std: 0.02,
        }
    }

    /// Laptop-size model used for the synthetic experiments.
    pub fn desk() -> Self {
        ModelConfig {
            input_dim: 160,
            num_blocks: 2,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            conv_kernel: 3,
            num_classes: 32,
            context_dim: 32,
            max_rel_dist: 16,
            subsample_stride: SUBSAMPLE_STRIDE,
            dropout: 0.0,
            init_std: 0.02,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(ModelConfig::paper()),
            "desk" => Ok(ModelConfig::desk()),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("num_blocks", self.num_blocks),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("conv_kernel", self.conv_kernel),
            ("context_dim", self.context_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if self.subsample_stride != SUBSAMPLE_STRIDE {
            return Err(Error::Config(format!(
                "subsampling stride is fixed at {SUBSAMPLE_STRIDE}, got {}",
                self.subsample_stride
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

/// Output frames after the stride-2, kernel-3 subsampling convolution.
pub fn output_frames(input_frames: usize) -> usize {
    if input_frames < SUBSAMPLE_KERNEL {
        0
    } else {
        (input_frames - SUBSAMPLE_KERNEL) / SUBSAMPLE_STRIDE + 1
    }
}

/// Input row whose unmasked features define the target at output frame `t`.
pub fn target_row(t: usize) -> usize {
    SUBSAMPLE_STRIDE * t + 1
}
