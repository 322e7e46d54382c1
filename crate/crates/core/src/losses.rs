//! Frame cross-entropy, the masked contrastive loss, and their weighted
//! combination.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::BatchKind;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{dot, norm, Mat};

/// Posteriors below this are clamped before taking the log.
pub const POSTERIOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Softmax temperature `k`.
    pub temperature: f64,
    /// Distractors `K` drawn per masked position.
    pub num_distractors: usize,
    pub cosine_epsilon: f64,
    /// Whether the true target appears in the softmax denominator.
    pub include_positive: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.1,
            num_distractors: 10,
            cosine_epsilon: 1e-8,
            include_positive: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("contrastive temperature must be positive".into()));
        }
        if self.num_distractors == 0 {
            return Err(Error::Config("need at least one distractor".into()));
        }
        if !(self.cosine_epsilon > 0.0) {
            return Err(Error::Config("cosine epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step loss values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: Option<f64>,
    pub l_c: f64,
    pub combined: f64,
    pub num_ce_frames: usize,
    pub num_contrastive_positions: usize,
    pub clamp_count: usize,
    pub batch_kind: BatchKind,
}

/// `a·b / (max(|a|, eps) · max(|b|, eps))`.
pub fn cosine_sim(a: &[f64], b: &[f64], epsilon: f64) -> f64 {
    dot(a, b) / (norm(a).max(epsilon) * norm(b).max(epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    /// Mean over all valid frames of the batch.
    pub loss: f64,
    pub frames: usize,
    pub clamped: usize,
}

/// Frame-weighted mean of `-ln ŷ[t, y_t]` over the valid frames of every
/// utterance. `posteriors[b]` may be padded past `labels[b].len()`.
pub fn cross_entropy_loss(posteriors: &[Mat], labels: &[Vec<usize>]) -> Result<CrossEntropy> {
    if posteriors.len() != labels.len() {
        return Err(Error::Shape("posterior and label batch sizes differ".into()));
    }
    let mut sum = 0.0;
    let mut frames = 0;
    let mut clamped = 0;
    for (post, lab) in posteriors.iter().zip(labels) {
        if lab.len() > post.rows {
            return Err(Error::Alignment(format!(
                "{} labels for {} posterior frames",
                lab.len(),
                post.rows
            )));
        }
        for (t, &c) in lab.iter().enumerate() {
            if c >= post.cols {
                return Err(Error::Alignment(format!("label {c} outside [0, {})", post.cols)));
            }
            let p = post.get(t, c);
            if p < POSTERIOR_FLOOR {
                clamped += 1;
            }
            sum -= p.max(POSTERIOR_FLOOR).ln();
        }
        frames += lab.len();
    }
    if frames == 0 {
        return Err(Error::Input("cross entropy over zero frames".into()));
    }
    Ok(CrossEntropy {
        loss: sum / frames as f64,
        frames,
        clamped,
    })
}

/// Summed cross-entropy of `softmax(logits)` and its gradient w.r.t. the
/// logits. Rows past `labels.len()` get zero gradient; clamped frames too.
pub(crate) fn cross_entropy_sum_with_grad(logits: &Mat, labels: &[usize]) -> (f64, Mat, usize) {
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    let mut sum = 0.0;
    let mut clamped = 0;
    for (t, &c) in labels.iter().enumerate() {
        let mut p = logits.row(t).to_vec();
        crate::tensor::softmax_in_place(&mut p);
        if p[c] < POSTERIOR_FLOOR {
            clamped += 1;
            sum -= POSTERIOR_FLOOR.ln();
            continue;
        }
        sum -= p[c].ln();
        p[c] -= 1.0;
        grad.row_mut(t).copy_from_slice(&p);
    }
    (sum, grad, clamped)
}

/// Draws `k` distractors for masked position `t` among the other entries of
/// `positions`: without replacement when enough exist, otherwise uniformly
/// with replacement.
pub fn sample_distractors(positions: &[usize], t: usize, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = positions.iter().copied().filter(|&p| p != t).collect();
    if eligible.is_empty() {
        return Err(Error::DegenerateDistractors(format!(
            "position {t} is the only masked position"
        )));
    }
    if eligible.len() >= k {
        Ok(index::sample(rng, eligible.len(), k)
            .into_iter()
            .map(|i| eligible[i])
            .collect())
    } else {
        Ok((0..k).map(|_| eligible[rng.gen_range(0..eligible.len())]).collect())
    }
}

/// Distractors for every position of one utterance, in position order.
pub fn sample_all_distractors(positions: &[usize], k: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    positions
        .iter()
        .map(|&t| sample_distractors(positions, t, k, rng))
        .collect()
}

pub(crate) struct ContrastiveTerms {
    pub loss: f64,
    pub d_contexts: Mat,
    pub d_targets: Mat,
}

/// Gradient of `cos(a, b)` w.r.t. `a`, accumulated into `out` with weight `w`.
fn add_cos_grad(out: &mut [f64], a: &[f64], b: &[f64], eps: f64, w: f64) {
    let na_raw = norm(a);
    let na = na_raw.max(eps);
    let nb = norm(b).max(eps);
    let cos = dot(a, b) / (na * nb);
    let self_term = if na_raw > eps { cos / (na * na) } else { 0.0 };
    for ((o, &ai), &bi) in out.iter_mut().zip(a).zip(b) {
        *o += w * (bi / (na * nb) - self_term * ai);
    }
}

/// Summed per-position contrastive loss and gradients w.r.t. every row of
/// `contexts` and `targets`.
pub(crate) fn contrastive_sum_with_grad(
    contexts: &Mat,
    targets: &Mat,
    positions: &[usize],
    distractors: &[Vec<usize>],
    cfg: &ContrastiveConfig,
) -> ContrastiveTerms {
    let mut d_contexts = Mat::zeros(contexts.rows, contexts.cols);
    let mut d_targets = Mat::zeros(targets.rows, targets.cols);
    let mut loss = 0.0;
    let inv_k = 1.0 / cfg.temperature;
    let eps = cfg.cosine_epsilon;
    for (&t, negs) in positions.iter().zip(distractors) {
        let c = contexts.row(t);
        let candidates: Vec<usize> = std::iter::once(t).chain(negs.iter().copied()).collect();
        let logits: Vec<f64> = candidates
            .iter()
            .map(|&j| cosine_sim(c, targets.row(j), eps) * inv_k)
            .collect();
        // dL/dlogit_j
        let first = usize::from(!cfg.include_positive);
        let denom = &logits[first..];
        let max = denom.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = denom.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += max + z.ln() - logits[0];
        let mut dlogit = vec![0.0; candidates.len()];
        for (i, e) in exps.iter().enumerate() {
            dlogit[first + i] += e / z;
        }
        dlogit[0] -= 1.0;

        let mut dc = vec![0.0; contexts.cols];
        for (&j, &dl) in candidates.iter().zip(&dlogit) {
            if dl == 0.0 {
                continue;
            }
            let q = targets.row(j);
            add_cos_grad(&mut dc, c, q, eps, dl * inv_k);
            add_cos_grad(d_targets.row_mut(j), q, c, eps, dl * inv_k);
        }
        for (o, v) in d_contexts.row_mut(t).iter_mut().zip(&dc) {
            *o += v;
        }
    }
    ContrastiveTerms {
        loss,
        d_contexts,
        d_targets,
    }
}

/// Mean contrastive loss over all masked positions of a batch.
///
/// `positions[b]` lists the masked valid output frames of utterance `b`;
/// distractors come from the same utterance.
pub fn contrastive_loss(
    contexts: &[Mat],
    targets: &[Mat],
    positions: &[Vec<usize>],
    cfg: &ContrastiveConfig,
    rng: &mut Rng,
) -> Result<f64> {
    cfg.validate()?;
    let mut sum = 0.0;
    let mut count = 0;
    for ((c, q), pos) in contexts.iter().zip(targets).zip(positions) {
        if pos.is_empty() {
            continue;
        }
        let negs = sample_all_distractors(pos, cfg.num_distractors, rng)?;
        sum += contrastive_sum_with_grad(c, q, pos, &negs, cfg).loss;
        count += pos.len();
    }
    if count == 0 {
        return Err(Error::Input("contrastive loss needs at least one masked position".into()));
    }
    Ok(sum / count as f64)
}

/// Combines the two losses according to the batch kind.
pub fn joint_loss(kind: BatchKind, l_ce: Option<f64>, l_c: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    match (kind, l_ce) {
        (BatchKind::Labelled, Some(ce)) => Ok(alpha * ce + (1.0 - alpha) * l_c),
        (BatchKind::Unlabelled, None) => Ok(l_c),
        (BatchKind::Labelled, None) => Err(Error::Input(
            "labelled batch is missing its cross-entropy term".into(),
        )),
        (BatchKind::Unlabelled, Some(_)) => Err(Error::Input(
            "unlabelled batch cannot carry a cross-entropy term".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn cosine_cases() {
        assert!((cosine_sim(&[1.0, 2.0], &[1.0, 2.0], 1e-8) - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0], 1e-8), 0.0);
        let expected = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        let got = cosine_sim(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], 1e-8);
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.97463).abs() < 1e-5);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0], 1e-8), 0.0);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Mat::filled(3, 4, 0.25);
        let ce = cross_entropy_loss(&[uniform], &[vec![0, 1, 3]]).unwrap();
        assert!((ce.loss - 4f64.ln()).abs() < 1e-12);

        let onehot = Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let ce = cross_entropy_loss(&[onehot.clone()], &[vec![1, 0]]).unwrap();
        assert_eq!(ce.loss, 0.0);

        let p = Mat::from_rows(&[vec![0.5, 0.5], vec![0.75, 0.25]]);
        let ce = cross_entropy_loss(&[p], &[vec![0, 1]]).unwrap();
        assert!((ce.loss - 1.039721).abs() < 1e-6);

        let ce = cross_entropy_loss(&[onehot], &[vec![0, 0]]).unwrap();
        assert_eq!(ce.clamped, 1);
        assert!((ce.loss - (-POSTERIOR_FLOOR.ln()) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_weights_by_frames() {
        // Utterance A: 1 frame at ln 2, utterance B: 3 frames at 0.
        let a = Mat::from_rows(&[vec![0.5, 0.5]]);
        let b = Mat::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let ce = cross_entropy_loss(&[a, b], &[vec![0], vec![0, 0, 0]]).unwrap();
        assert!((ce.loss - 2f64.ln() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn distractor_exhaustion_and_pairs() {
        let mut rng = stream(1, Stream::Distractor, 0);
        for _ in 0..20 {
            assert_eq!(sample_distractors(&[3, 8], 3, 1, &mut rng).unwrap(), vec![8]);
        }
        let pos: Vec<usize> = (0..11).collect();
        let mut d = sample_distractors(&pos, 4, 10, &mut rng).unwrap();
        d.sort();
        assert_eq!(d, vec![0, 1, 2, 3, 5, 6, 7, 8, 9, 10]);
        assert!(matches!(
            sample_distractors(&[5], 5, 1, &mut rng),
            Err(Error::DegenerateDistractors(_))
        ));
        let d = sample_distractors(&[1, 2, 3], 1, 5, &mut rng).unwrap();
        assert_eq!(d.len(), 5);
        assert!(d.iter().all(|&x| x == 2 || x == 3));
    }

    #[test]
    fn distractor_frequencies_are_uniform() {
        let pos = [0, 1, 2, 3, 4];
        let draws = 10_000;
        let mut counts = [0usize; 5];
        let mut rng = stream(2, Stream::Distractor, 0);
        for _ in 0..draws {
            for d in sample_distractors(&pos, 0, 2, &mut rng).unwrap() {
                counts[d] += 1;
            }
        }
        assert_eq!(counts[0], 0);
        let sigma = (0.5f64 * 0.5 / draws as f64).sqrt();
        for &c in &counts[1..] {
            let f = c as f64 / draws as f64;
            assert!((f - 0.5).abs() < 3.0 * sigma, "frequency {f}");
        }
    }

    fn scalar_contrastive(sims: &[f64], k: f64, include_positive: bool) -> f64 {
        // Build unit vectors in 2-D with the requested cosines to a fixed context.
        let c = Mat::from_rows(&[vec![1.0, 0.0]]);
        let mut ctx = Mat::zeros(sims.len(), 2);
        ctx.row_mut(0).copy_from_slice(c.row(0));
        let mut tgt = Mat::zeros(sims.len(), 2);
        for (i, &s) in sims.iter().enumerate() {
            tgt.row_mut(i).copy_from_slice(&[s, (1.0 - s * s).max(0.0).sqrt()]);
        }
        let cfg = ContrastiveConfig {
            temperature: k,
            num_distractors: sims.len() - 1,
            include_positive,
            ..Default::default()
        };
        let negs = vec![(1..sims.len()).collect::<Vec<_>>()];
        contrastive_sum_with_grad(&ctx, &tgt, &[0], &negs, &cfg).loss
    }

    #[test]
    fn contrastive_scalar_cases() {
        let eq = scalar_contrastive(&[0.3; 8], 0.1, true);
        assert!((eq - 8f64.ln()).abs() < 1e-12);
        assert!((eq - 2.079442).abs() < 1e-6);

        let mut sims = vec![0.0; 8];
        sims[0] = 1.0;
        let v = scalar_contrastive(&sims, 0.1, true);
        let expected = (1.0 + 7.0 * (-10f64).exp()).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 3.178e-4).abs() < 1e-6);

        for k in [0.05, 0.1, 1.0, 3.0] {
            assert!((scalar_contrastive(&[0.5, 0.5], k, true) - 2f64.ln()).abs() < 1e-12);
        }
        // Exclusive denominator: -s0/k + ln(sum over distractors).
        let v = scalar_contrastive(&[0.5, 0.5], 0.1, false);
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn contrastive_is_scale_invariant() {
        let mut rng = stream(4, Stream::Init, 0);
        let c = Mat::from_vec(6, 3, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let q = Mat::from_vec(6, 3, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let pos = vec![vec![0, 2, 3, 5]];
        let cfg = ContrastiveConfig {
            num_distractors: 2,
            ..Default::default()
        };
        let a = contrastive_loss(&[c.clone()], &[q.clone()], &pos, &cfg, &mut stream(1, Stream::Distractor, 0)).unwrap();
        let (mut c2, mut q2) = (c, q);
        c2.scale(3.7);
        q2.scale(0.2);
        let b = contrastive_loss(&[c2], &[q2], &pos, &cfg, &mut stream(1, Stream::Distractor, 0)).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert!(a >= 0.0);
    }

    #[test]
    fn joint_loss_dispatch() {
        assert_eq!(joint_loss(BatchKind::Labelled, Some(2.0), 1.0, 0.75).unwrap(), 1.75);
        assert_eq!(joint_loss(BatchKind::Labelled, Some(2.0), 1.0, 1.0).unwrap(), 2.0);
        for a in [0.0, 0.3, 1.0] {
            assert_eq!(joint_loss(BatchKind::Unlabelled, None, 1.25, a).unwrap(), 1.25);
        }
        assert!(joint_loss(BatchKind::Labelled, None, 1.0, 0.5).is_err());
        assert!(joint_loss(BatchKind::Labelled, Some(1.0), 1.0, 1.5).is_err());
    }
}
