use rand::seq::IteratorRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Mat;

/// Which model-input frames are replaced by the learned mask vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked: Vec<bool>,
}

impl MaskPlan {
    pub fn none(num_frames: usize) -> Self {
        MaskPlan {
            masked: vec![false; num_frames],
        }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskPolicy {
    pub start_prob: f64,
    pub span: usize,
    /// Minimum number of masked target-aligned frames per utterance, so
    /// every masked position has at least one distractor.
    pub min_positions: usize,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            start_prob: 0.065,
            span: 4,
            min_positions: 2,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.start_prob) {
            return Err(Error::Config(format!(
                "mask start probability {} outside [0, 1]",
                self.start_prob
            )));
        }
        if self.span == 0 {
            return Err(Error::Config("mask span must be at least 1".into()));
        }
        Ok(())
    }
}

/// Samples span starts independently per frame and masks `span` frames from
/// each start, clipped at the end. If nothing was sampled, one frame drawn
/// uniformly is masked.
pub fn plan_masks(num_frames: usize, start_prob: f64, span: usize, rng: &mut Rng) -> MaskPlan {
    let mut masked = vec![false; num_frames];
    for t in 0..num_frames {
        if rng.gen::<f64>() < start_prob {
            for m in masked.iter_mut().skip(t).take(span) {
                *m = true;
            }
        }
    }
    if num_frames > 0 && !masked.contains(&true) {
        masked[rng.gen_range(0..num_frames)] = true;
    }
    MaskPlan { masked }
}

/// Tops up a plan so that at least `min` of the frames in `targets` are masked.
pub(crate) fn ensure_targets_masked(plan: &mut MaskPlan, targets: &[usize], min: usize, rng: &mut Rng) {
    let have = targets.iter().filter(|&&r| plan.masked[r]).count();
    if have >= min {
        return;
    }
    let free = targets.iter().copied().filter(|&r| !plan.masked[r]);
    for r in free.choose_multiple(rng, min - have) {
        plan.masked[r] = true;
    }
}

/// Replaces masked rows of `features` with `fill`.
pub fn apply_mask(features: &Mat, plan: &MaskPlan, fill: &[f64]) -> Result<Mat> {
    if plan.len() != features.rows {
        return Err(Error::Shape(format!(
            "mask plan covers {} frames but features have {}",
            plan.len(),
            features.rows
        )));
    }
    if fill.len() != features.cols {
        return Err(Error::Shape(format!(
            "mask vector has dim {} but features have {}",
            fill.len(),
            features.cols
        )));
    }
    let mut out = features.clone();
    for (t, &m) in plan.masked.iter().enumerate() {
        if m {
            out.row_mut(t).copy_from_slice(fill);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn zero_probability_forces_one_frame() {
        for i in 0..20 {
            let plan = plan_masks(30, 0.0, 10, &mut stream(1, Stream::Mask, i));
            assert_eq!(plan.count(), 1);
        }
    }

    #[test]
    fn full_probability_masks_everything() {
        let plan = plan_masks(17, 1.0, 1, &mut stream(1, Stream::Mask, 0));
        assert_eq!(plan.count(), 17);
    }

    #[test]
    fn coverage_matches_closed_form() {
        // Interior frame t is covered unless none of the `span` starts that
        // reach it fired: 1 - (1 - p)^span. Frames near the start see fewer
        // candidate starts; account for that exactly.
        let (n, p, span, draws) = (1000usize, 0.065f64, 10usize, 200u64);
        let expected: f64 = (0..n)
            .map(|t| 1.0 - (1.0 - p).powi((t + 1).min(span) as i32))
            .sum::<f64>()
            / n as f64;
        let interior = 1.0 - (1.0f64 - p).powi(span as i32);
        assert!((interior - 0.489).abs() < 1e-3);
        let fractions: Vec<f64> = (0..draws)
            .map(|i| plan_masks(n, p, span, &mut stream(11, Stream::Mask, i)).fraction())
            .collect();
        let mean = fractions.iter().sum::<f64>() / draws as f64;
        let var = fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        assert!(
            (mean - expected).abs() < 3.0 * se,
            "mean {mean} expected {expected} se {se}"
        );
    }

    #[test]
    fn apply_mask_cases() {
        let f = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]);
        let none = MaskPlan::none(4);
        assert_eq!(apply_mask(&f, &none, &[9.0, 9.0]).unwrap(), f);

        let all = MaskPlan { masked: vec![true; 4] };
        let out = apply_mask(&f, &all, &[9.0, -9.0]).unwrap();
        assert!((0..4).all(|t| out.row(t) == [9.0, -9.0]));

        let half = MaskPlan {
            masked: vec![true, false, true, false],
        };
        let out = apply_mask(&f, &half, &[0.0, 0.0]).unwrap();
        assert_eq!(out.row(0), [0.0, 0.0]);
        assert_eq!(out.row(1), f.row(1));
        assert_eq!(out.row(2), [0.0, 0.0]);
        assert_eq!(out.row(3), f.row(3));

        assert!(matches!(
            apply_mask(&f, &MaskPlan::none(3), &[0.0, 0.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn top_up_reaches_minimum() {
        let mut plan = MaskPlan::none(20);
        ensure_targets_masked(&mut plan, &[1, 3, 5, 7], 2, &mut stream(3, Stream::Mask, 0));
        assert_eq!([1, 3, 5, 7].iter().filter(|&&r| plan.masked[r]).count(), 2);
        assert_eq!(plan.count(), 2);
    }
}
