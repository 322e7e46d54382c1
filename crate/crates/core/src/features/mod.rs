//! Audio ingestion and acoustic features.
//!
//! The front end turns 16-bit PCM into 80-dim log-mel rows every 10 ms, then
//! pairs adjacent rows into 160-dim vectors at a 20 ms hop. That 160-dim
//! sequence is the model input.

mod io;
mod lfb;
mod synth;
mod vad;
mod wav;

pub use io::{
    read_features, read_labels, write_features, write_labels, Manifest, ManifestEntry,
    FEATURE_MAGIC,
};
pub use lfb::{compute_lfb, hz_to_mel, mel_to_hz, LfbConfig, LfbExtractor};
pub use synth::{generate_synthetic_corpus, SyntheticCorpus, SyntheticCorpusSpec};
pub use vad::{concat_segments, energy_vad, Segment};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Mono PCM audio scaled to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Input("audio contains non-finite samples".into()));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }
}

/// A `T' x D` feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Mat,
    pub frame_hop_ms: f64,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.frames.rows
    }

    pub fn dim(&self) -> usize {
        self.frames.cols
    }
}

/// One utterance: features and, when labelled, one class per output frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureMatrix,
    pub labels: Option<Vec<usize>>,
}

impl Utterance {
    pub fn is_labelled(&self) -> bool {
        self.labels.is_some()
    }

    /// Checks labels against the class count and the expected output length.
    pub fn validate_labels(&self, num_classes: usize, output_frames: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if labels.len() != output_frames {
                return Err(Error::Alignment(format!(
                    "utterance {} has {} labels but the model emits {} frames",
                    self.id,
                    labels.len(),
                    output_frames
                )));
            }
            if let Some(bad) = labels.iter().find(|&&c| c >= num_classes) {
                return Err(Error::Alignment(format!(
                    "utterance {} has label {} outside [0, {})",
                    self.id, bad, num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Pairs rows `(2t, 2t+1)` into one row of twice the width. An odd trailing
/// row is dropped.
pub fn stack_and_subsample(rows: &Mat, input_hop_ms: f64) -> Result<FeatureMatrix> {
    if rows.rows < 2 {
        return Err(Error::TooShort(format!(
            "need at least 2 rows to stack, got {}",
            rows.rows
        )));
    }
    let out_rows = rows.rows / 2;
    let mut frames = Mat::zeros(out_rows, rows.cols * 2);
    for t in 0..out_rows {
        let dst = frames.row_mut(t);
        dst[..rows.cols].copy_from_slice(rows.row(2 * t));
        dst[rows.cols..].copy_from_slice(rows.row(2 * t + 1));
    }
    Ok(FeatureMatrix {
        frames,
        frame_hop_ms: input_hop_ms * 2.0,
    })
}

/// Full front end: log-mel rows, then stacking.
pub fn extract_features(audio: &AudioBuffer, extractor: &LfbExtractor) -> Result<FeatureMatrix> {
    let rows = extractor.compute(audio)?;
    stack_and_subsample(&rows, extractor.config().hop_ms)
}

/// Number of model-input rows the canonical front end yields for `n` samples.
pub fn feature_frames_for_samples(n: usize, cfg: &LfbConfig, sample_rate: u32) -> usize {
    let win = cfg.win_samples(sample_rate);
    let hop = cfg.hop_samples(sample_rate);
    if n < win {
        return 0;
    }
    ((n - win) / hop + 1) / 2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stacking_concatenates_pairs() {
        let rows = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let f = stack_and_subsample(&rows, 10.0).unwrap();
        assert_eq!(f.frames.data, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f.frame_hop_ms, 20.0);
    }

    #[test]
    fn stacking_counts() {
        let f = stack_and_subsample(&Mat::zeros(98, 80), 10.0).unwrap();
        assert_eq!((f.num_frames(), f.dim()), (49, 160));
        let f = stack_and_subsample(&Mat::zeros(99, 80), 10.0).unwrap();
        assert_eq!(f.num_frames(), 49);
    }

    #[test]
    fn stacking_rejects_single_row() {
        assert!(matches!(
            stack_and_subsample(&Mat::zeros(1, 80), 10.0),
            Err(Error::TooShort(_))
        ));
    }

    #[test]
    fn label_validation() {
        let u = Utterance {
            id: "u".into(),
            features: FeatureMatrix {
                frames: Mat::zeros(10, 4),
                frame_hop_ms: 20.0,
            },
            labels: Some(vec![0, 1, 3]),
        };
        assert!(u.validate_labels(4, 3).is_ok());
        assert!(matches!(u.validate_labels(3, 3), Err(Error::Alignment(_))));
        assert!(matches!(u.validate_labels(4, 4), Err(Error::Alignment(_))));
    }
}
