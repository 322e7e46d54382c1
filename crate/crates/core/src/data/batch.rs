use rand::seq::SliceRandom;

use super::mask::{ensure_targets_masked, plan_masks, MaskPlan, MaskPolicy};
use super::BatchKind;
use crate::error::{Error, Result};
use crate::features::Utterance;
use crate::model::{output_frames, target_row};
use crate::rng::Rng;
use crate::tensor::Mat;

/// A padded group of utterances.
///
/// `features[b]` is `max_len x dim` with zero rows past `valid_lens[b]`.
/// Mask plans span `max_len` frames and never mark padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub kind: BatchKind,
    pub ids: Vec<String>,
    pub features: Vec<Mat>,
    pub valid_lens: Vec<usize>,
    pub labels: Option<Vec<Vec<usize>>>,
    pub mask_plans: Vec<MaskPlan>,
}

impl Batch {
    /// Builds an unmasked batch from `utterances` in the given order.
    pub fn from_utterances(utterances: &[&Utterance], kind: BatchKind) -> Result<Self> {
        let Some(first) = utterances.first() else {
            return Err(Error::Input("cannot build an empty batch".into()));
        };
        let dim = first.features.dim();
        let max_len = utterances
            .iter()
            .map(|u| u.features.num_frames())
            .max()
            .unwrap_or(0);
        let mut features = Vec::with_capacity(utterances.len());
        let mut valid_lens = Vec::with_capacity(utterances.len());
        let mut labels = Vec::new();
        for u in utterances {
            if u.features.dim() != dim {
                return Err(Error::Shape(format!(
                    "utterance {} has feature dim {} but batch uses {dim}",
                    u.id,
                    u.features.dim()
                )));
            }
            let n = u.features.num_frames();
            let mut padded = Mat::zeros(max_len, dim);
            padded.data[..n * dim].copy_from_slice(&u.features.frames.data);
            features.push(padded);
            valid_lens.push(n);
            if kind == BatchKind::Labelled {
                match &u.labels {
                    Some(l) => labels.push(l.clone()),
                    None => {
                        return Err(Error::Input(format!(
                            "utterance {} has no labels but was placed in a labelled batch",
                            u.id
                        )))
                    }
                }
            }
        }
        Ok(Batch {
            kind,
            ids: utterances.iter().map(|u| u.id.clone()).collect(),
            mask_plans: vec![MaskPlan::none(max_len); utterances.len()],
            features,
            valid_lens,
            labels: (kind == BatchKind::Labelled).then_some(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.features.first().map_or(0, |f| f.rows)
    }

    pub fn valid_mask(&self, b: usize) -> Vec<bool> {
        (0..self.max_len()).map(|t| t < self.valid_lens[b]).collect()
    }

    /// Plans a time mask for every utterance over its valid frames only.
    ///
    /// After span sampling, each utterance is topped up until at least
    /// `policy.min_positions` target-aligned frames are masked.
    pub fn plan_masks(&mut self, policy: &MaskPolicy, rng: &mut Rng) {
        let max_len = self.max_len();
        for (b, &n) in self.valid_lens.iter().enumerate() {
            let mut plan = plan_masks(n, policy.start_prob, policy.span, rng);
            let targets: Vec<usize> = (0..output_frames(n)).map(target_row).collect();
            ensure_targets_masked(&mut plan, &targets, policy.min_positions, rng);
            plan.masked.resize(max_len, false);
            self.mask_plans[b] = plan;
        }
    }

    pub fn clear_masks(&mut self) {
        let max_len = self.max_len();
        for p in &mut self.mask_plans {
            *p = MaskPlan::none(max_len);
        }
    }
}

/// Shuffles `utterances` and groups them into padded batches of
/// `batch_size` (the last one may be short).
pub fn make_batches(
    utterances: &[Utterance],
    batch_size: usize,
    kind: BatchKind,
    rng: &mut Rng,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<&Utterance> = utterances.iter().collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_utterances(chunk, kind))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMatrix;
    use crate::rng::{stream, Stream};

    fn utt(id: usize, frames: usize, labelled: bool) -> Utterance {
        Utterance {
            id: format!("u{id}"),
            features: FeatureMatrix {
                frames: Mat::filled(frames, 4, id as f64 + 1.0),
                frame_hop_ms: 20.0,
            },
            labels: labelled.then(|| vec![0; output_frames(frames)]),
        }
    }

    #[test]
    fn batch_sizes() {
        let us: Vec<_> = (0..10).map(|i| utt(i, 8, true)).collect();
        let bs = make_batches(&us, 4, BatchKind::Labelled, &mut stream(0, Stream::Labelled, 0)).unwrap();
        assert_eq!(bs.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert!(bs.iter().all(|b| (0..b.len()).all(|i| b.valid_mask(i).iter().all(|&v| v))));
    }

    #[test]
    fn shuffle_is_deterministic() {
        let us: Vec<_> = (0..10).map(|i| utt(i, 8 + i, false)).collect();
        let a = make_batches(&us, 3, BatchKind::Unlabelled, &mut stream(5, Stream::Unlabelled, 0)).unwrap();
        let b = make_batches(&us, 3, BatchKind::Unlabelled, &mut stream(5, Stream::Unlabelled, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|b| b.labels.is_none()));
    }

    #[test]
    fn empty_input_gives_no_batches() {
        let bs = make_batches(&[], 4, BatchKind::Labelled, &mut stream(0, Stream::Labelled, 0)).unwrap();
        assert!(bs.is_empty());
    }

    #[test]
    fn padding_and_valid_mask() {
        let us = [utt(0, 5, true), utt(1, 9, true)];
        let b = Batch::from_utterances(&[&us[0], &us[1]], BatchKind::Labelled).unwrap();
        assert_eq!(b.max_len(), 9);
        assert_eq!(b.valid_mask(0), [vec![true; 5], vec![false; 4]].concat());
        assert!(b.features[0].row(7).iter().all(|&v| v == 0.0));
        assert_eq!(b.features[1].row(8), &[2.0; 4]);
    }

    #[test]
    fn labelled_batch_requires_labels() {
        let us = [utt(0, 5, false)];
        assert!(Batch::from_utterances(&[&us[0]], BatchKind::Labelled).is_err());
    }

    #[test]
    fn masks_never_touch_padding_and_meet_minimum() {
        let us = [utt(0, 7, true), utt(1, 30, true)];
        let mut b = Batch::from_utterances(&[&us[0], &us[1]], BatchKind::Labelled).unwrap();
        for i in 0..50 {
            let policy = MaskPolicy {
                start_prob: 0.0,
                ..MaskPolicy::default()
            };
            b.plan_masks(&policy, &mut stream(i, Stream::Mask, 0));
            for u in 0..2 {
                let plan = &b.mask_plans[u];
                assert!(plan.masked[b.valid_lens[u]..].iter().all(|&m| !m));
                let targets = (0..output_frames(b.valid_lens[u]))
                    .filter(|&t| plan.masked[target_row(t)])
                    .count();
                assert!(targets >= 2);
            }
        }
    }
}
