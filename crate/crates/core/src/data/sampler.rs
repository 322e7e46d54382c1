use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{make_batches, Batch, BatchKind};
use crate::error::{Error, Result};
use crate::features::Utterance;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Probability of drawing a labelled batch.
    pub p: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!(
                "labelled-batch probability {} outside [0, 1]",
                self.p
            )));
        }
        Ok(())
    }
}

/// Batch kind for `step`, a pure function of `(seed, step)`.
pub fn sample_batch_kind(cfg: &SamplerConfig, step: u64) -> BatchKind {
    let u: f64 = rng::stream(cfg.seed, Stream::BatchKind, step).gen();
    if u < cfg.p {
        BatchKind::Labelled
    } else {
        BatchKind::Unlabelled
    }
}

/// An endless stream of batches over one corpus. Each pass over the corpus
/// is shuffled with its own generator, so the `i`-th batch is a pure
/// function of `(seed, i)`.
struct CorpusStream<'a> {
    utterances: &'a [Utterance],
    kind: BatchKind,
    seed: u64,
    batch_size: usize,
    cached: Option<(u64, Vec<Batch>)>,
}

impl CorpusStream<'_> {
    fn batches_per_epoch(&self) -> u64 {
        self.utterances.len().div_ceil(self.batch_size) as u64
    }

    fn get(&mut self, index: u64) -> Result<Batch> {
        let per_epoch = self.batches_per_epoch();
        if per_epoch == 0 {
            return Err(Error::Config(format!(
                "{} corpus is empty",
                self.kind.as_str()
            )));
        }
        let epoch = index / per_epoch;
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let purpose = match self.kind {
                BatchKind::Labelled => Stream::Labelled,
                BatchKind::Unlabelled => Stream::Unlabelled,
            };
            let mut rng = rng::stream(self.seed, purpose, epoch);
            let batches = make_batches(self.utterances, self.batch_size, self.kind, &mut rng)?;
            self.cached = Some((epoch, batches));
        }
        let (_, batches) = self.cached.as_ref().expect("epoch cached above");
        Ok(batches[(index % per_epoch) as usize].clone())
    }
}

/// Labelled and unlabelled batch streams with independent cursors.
pub struct BatchStreams<'a> {
    sampler: SamplerConfig,
    labelled: CorpusStream<'a>,
    unlabelled: CorpusStream<'a>,
    /// Batches drawn so far from each stream.
    pub cursors: (u64, u64),
}

impl<'a> BatchStreams<'a> {
    pub fn new(
        sampler: SamplerConfig,
        labelled: &'a [Utterance],
        unlabelled: &'a [Utterance],
        batch_size: usize,
        data_seed: u64,
    ) -> Result<Self> {
        sampler.validate()?;
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if sampler.p > 0.0 && labelled.is_empty() {
            return Err(Error::Config(
                "labelled-batch probability is positive but the labelled corpus is empty".into(),
            ));
        }
        if sampler.p < 1.0 && unlabelled.is_empty() {
            return Err(Error::Config(
                "unlabelled-batch probability is positive but the unlabelled corpus is empty"
                    .into(),
            ));
        }
        if let Some(u) = labelled.iter().find(|u| u.labels.is_none()) {
            return Err(Error::Input(format!(
                "utterance {} in the labelled corpus has no labels",
                u.id
            )));
        }
        Ok(BatchStreams {
            sampler,
            labelled: CorpusStream {
                utterances: labelled,
                kind: BatchKind::Labelled,
                seed: data_seed,
                batch_size,
                cached: None,
            },
            unlabelled: CorpusStream {
                utterances: unlabelled,
                kind: BatchKind::Unlabelled,
                seed: data_seed,
                batch_size,
                cached: None,
            },
            cursors: (0, 0),
        })
    }

    /// Draws the batch for `step` and advances the matching cursor.
    pub fn next(&mut self, step: u64) -> Result<Batch> {
        match sample_batch_kind(&self.sampler, step) {
            BatchKind::Labelled => {
                let b = self.labelled.get(self.cursors.0)?;
                self.cursors.0 += 1;
                Ok(b)
            }
            BatchKind::Unlabelled => {
                let b = self.unlabelled.get(self.cursors.1)?;
                self.cursors.1 += 1;
                Ok(b)
            }
        }
    }
}
