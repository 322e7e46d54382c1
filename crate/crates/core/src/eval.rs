//! Frame accuracy on held-out data and comparison of two runs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Batch, BatchKind};
use crate::error::{Error, Result};
use crate::features::Utterance;
use crate::model::{build_graph, output_frames, ForwardOptions, ModelParams};
use crate::tensor::{argmax, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frame_accuracy: f64,
    /// `None` for classes absent from the evaluation set.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_counts: Vec<usize>,
    pub num_frames: usize,
    pub num_utterances: usize,
    pub checkpoint_id: String,
    pub config_digest: String,
    /// Identifies the evaluation set; comparisons require equal digests.
    pub eval_set_digest: String,
}

/// Relative change of `candidate` over `baseline`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_accuracy: f64,
    pub candidate_accuracy: f64,
    pub absolute_delta: f64,
    /// Percent; positive when the candidate is better.
    pub relative_delta_pct: f64,
    /// Candidate minus baseline accuracy per class; `None` for absent classes.
    pub per_class_delta: Vec<Option<f64>>,
}

/// SHA-256 over ids, labels and feature bits, in order.
pub fn eval_set_digest(utterances: &[Utterance]) -> String {
    let mut h = Sha256::new();
    for u in utterances {
        h.update((u.id.len() as u64).to_le_bytes());
        h.update(u.id.as_bytes());
        let (r, c) = u.features.frames.shape();
        h.update((r as u64).to_le_bytes());
        h.update((c as u64).to_le_bytes());
        for v in &u.features.frames.data {
            h.update(v.to_le_bytes());
        }
        match &u.labels {
            Some(l) => {
                h.update([1]);
                h.update((l.len() as u64).to_le_bytes());
                for &c in l {
                    h.update((c as u64).to_le_bytes());
                }
            }
            None => h.update([0]),
        }
    }
    hex::encode(h.finalize())
}

/// Posteriors for each utterance, trimmed to its valid output frames.
/// Runs without masking and without the contrastive heads.
pub fn infer_posteriors(params: &ModelParams, utterances: &[Utterance], batch_size: usize) -> Result<Vec<Mat>> {
    let batch_size = batch_size.max(1);
    let mut out = Vec::with_capacity(utterances.len());
    for chunk in utterances.chunks(batch_size) {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        let batch = Batch::from_utterances(&refs, BatchKind::Unlabelled)?;
        let g = build_graph(params, &batch, ForwardOptions::inference())?;
        for (b, &logits) in g.logits.iter().enumerate() {
            let post = g.tape.value(logits).softmax_rows();
            let n = g.out_lens[b];
            out.push(Mat::from_vec(n, post.cols, post.data[..n * post.cols].to_vec()));
        }
    }
    Ok(out)
}

/// Frame accuracy of argmax posteriors against forced-alignment labels.
pub fn evaluate(
    params: &ModelParams,
    utterances: &[Utterance],
    batch_size: usize,
    checkpoint_id: &str,
    config_digest: &str,
) -> Result<EvalReport> {
    let classes = params.config.num_classes;
    for u in utterances {
        if u.labels.is_none() {
            return Err(Error::Input(format!("evaluation utterance {} has no labels", u.id)));
        }
        u.validate_labels(classes, output_frames(u.features.num_frames()))?;
    }
    let posteriors = infer_posteriors(params, utterances, batch_size)?;
    let mut counts = vec![0usize; classes];
    let mut correct = vec![0usize; classes];
    for (u, post) in utterances.iter().zip(&posteriors) {
        for (t, &y) in u.labels.as_ref().unwrap().iter().enumerate() {
            counts[y] += 1;
            if predict(post.row(t), &u.id, t) == y {
                correct[y] += 1;
            }
        }
    }
    let num_frames: usize = counts.iter().sum();
    if num_frames == 0 {
        return Err(Error::Input("evaluation set has no frames".into()));
    }
    Ok(EvalReport {
        frame_accuracy: correct.iter().sum::<usize>() as f64 / num_frames as f64,
        per_class_accuracy: counts
            .iter()
            .zip(&correct)
            .map(|(&n, &c)| (n > 0).then(|| c as f64 / n as f64))
            .collect(),
        per_class_counts: counts,
        num_frames,
        num_utterances: utterances.len(),
        checkpoint_id: checkpoint_id.to_string(),
        config_digest: config_digest.to_string(),
        eval_set_digest: eval_set_digest(utterances),
    })
}

/// Argmax of one posterior row. Exact ties are split by a hash of the
/// utterance id and frame index, so an uninformative model scores chance
/// rather than the frequency of class 0.
pub fn predict(row: &[f64], id: &str, t: usize) -> usize {
    let best = row[argmax(row)];
    let ties: Vec<usize> = (0..row.len()).filter(|&c| row[c] == best).collect();
    if ties.len() == 1 {
        return ties[0];
    }
    // FNV-1a over the id, then the frame index through a splitmix finaliser.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ties[(z % ties.len() as u64) as usize]
}

pub fn compare_runs(baseline: &EvalReport, candidate: &EvalReport) -> Result<Comparison> {
    if baseline.eval_set_digest != candidate.eval_set_digest {
        return Err(Error::Comparison(format!(
            "evaluation sets differ ({} vs {})",
            baseline.eval_set_digest, candidate.eval_set_digest
        )));
    }
    if baseline.frame_accuracy <= 0.0 {
        return Err(Error::Comparison(
            "baseline accuracy is zero; relative change is undefined".into(),
        ));
    }
    let delta = candidate.frame_accuracy - baseline.frame_accuracy;
    Ok(Comparison {
        baseline_accuracy: baseline.frame_accuracy,
        candidate_accuracy: candidate.frame_accuracy,
        absolute_delta: delta,
        relative_delta_pct: 100.0 * delta / baseline.frame_accuracy,
        per_class_delta: baseline
            .per_class_accuracy
            .iter()
            .zip(&candidate.per_class_accuracy)
            .map(|(a, b)| Some(b.as_ref()? - a.as_ref()?))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(acc: f64, digest: &str) -> EvalReport {
        EvalReport {
            frame_accuracy: acc,
            per_class_accuracy: vec![],
            per_class_counts: vec![],
            num_frames: 100,
            num_utterances: 1,
            checkpoint_id: "x".into(),
            config_digest: "y".into(),
            eval_set_digest: digest.into(),
        }
    }

    #[test]
    fn relative_delta() {
        let c = compare_runs(&report(0.40, "d"), &report(0.42, "d")).unwrap();
        assert!((c.relative_delta_pct - 5.0).abs() < 1e-9);
        let c = compare_runs(&report(0.50, "d"), &report(0.45, "d")).unwrap();
        assert!((c.relative_delta_pct + 10.0).abs() < 1e-9);
    }

    #[test]
    fn per_class_deltas_weight_to_total() {
        let mk = |acc: Vec<f64>| {
            let counts = vec![10usize, 30, 60];
            let correct: f64 = acc.iter().zip(&counts).map(|(a, &n)| a * n as f64).sum();
            EvalReport {
                frame_accuracy: correct / 100.0,
                per_class_accuracy: acc.into_iter().map(Some).collect(),
                per_class_counts: counts,
                ..report(0.0, "d")
            }
        };
        let (a, b) = (mk(vec![0.5, 0.2, 0.9]), mk(vec![0.3, 0.6, 0.8]));
        let c = compare_runs(&a, &b).unwrap();
        let weighted: f64 = c
            .per_class_delta
            .iter()
            .zip(&a.per_class_counts)
            .map(|(d, &n)| d.unwrap() * n as f64 / 100.0)
            .sum();
        assert!((weighted - c.absolute_delta).abs() < 1e-12);
    }

    #[test]
    fn ties_split_without_bias() {
        let row = [0.25; 4];
        let mut hits = [0usize; 4];
        for t in 0..4000 {
            hits[predict(&row, "utt", t)] += 1;
        }
        // 3 sigma of a binomial(4000, 1/4) is about 82.
        assert!(hits.iter().all(|&h| (h as f64 - 1000.0).abs() < 82.0), "{hits:?}");
        assert_eq!(predict(&[0.1, 0.7, 0.2], "utt", 3), 1);
        assert_eq!(predict(&row, "a", 5), predict(&row, "a", 5));
    }

    #[test]
    fn mismatched_sets_rejected() {
        assert!(matches!(
            compare_runs(&report(0.4, "a"), &report(0.4, "b")),
            Err(Error::Comparison(_))
        ));
        assert!(compare_runs(&report(0.0, "a"), &report(0.4, "a")).is_err());
    }
}
