use crate::data::{Batch, BatchKind};
use crate::error::{Error, Result};
use crate::losses::{joint_loss, sample_all_distractors, ContrastiveConfig, LossBreakdown};
use crate::model::{build_graph, ForwardOptions, ModelParams};
use crate::rng::Rng;
use crate::tensor::Mat;

/// Which scalar to differentiate. Training uses `Combined`; the other two
/// exist so each loss can be checked against finite differences on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelector {
    CrossEntropy,
    Contrastive,
    Combined,
}

/// Loss values and parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub breakdown: LossBreakdown,
    /// Value of the selected scalar.
    pub value: f64,
    pub grads: Vec<Option<Mat>>,
}

/// Forward and backward pass of the training objective on a masked batch.
///
/// Distractors are drawn from `distractor_rng` in utterance order, then
/// position order, so two calls with equal generators see equal negatives.
pub fn batch_objective(
    params: &ModelParams,
    batch: &Batch,
    alpha: f64,
    contrastive: &ContrastiveConfig,
    selector: LossSelector,
    distractor_rng: &mut Rng,
    dropout_rng: Option<&mut Rng>,
) -> Result<BatchGradients> {
    let labelled = batch.kind == BatchKind::Labelled;
    if selector == LossSelector::CrossEntropy && !labelled {
        return Err(Error::Input("cross entropy requested on an unlabelled batch".into()));
    }
    let mut g = build_graph(
        params,
        batch,
        ForwardOptions {
            classify: labelled,
            contrastive: true,
            dropout_rng,
        },
    )?;

    let mut ce = None;
    let mut clamp_count = 0;
    let mut num_ce_frames = 0;
    if labelled {
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| Error::Input("labelled batch without labels".into()))?;
        let mut sum = None;
        for (b, l) in labels.iter().enumerate() {
            let (node, clamped) = g.tape.cross_entropy(g.logits[b], l);
            clamp_count += clamped;
            num_ce_frames += l.len();
            sum = Some(match sum {
                None => node,
                Some(acc) => g.tape.add(acc, node),
            });
        }
        let sum = sum.ok_or_else(|| Error::Input("empty batch".into()))?;
        ce = Some(g.tape.scale(sum, 1.0 / num_ce_frames as f64));
    }

    let mut lc_sum = None;
    let mut positions = 0;
    for b in 0..batch.len() {
        let pos = &g.masked_positions[b];
        if pos.is_empty() {
            continue;
        }
        let negs = sample_all_distractors(pos, contrastive.num_distractors, distractor_rng)?;
        let node = g
            .tape
            .contrastive(g.contexts[b], g.targets[b], pos, &negs, contrastive);
        positions += pos.len();
        lc_sum = Some(match lc_sum {
            None => node,
            Some(acc) => g.tape.add(acc, node),
        });
    }
    let lc_sum = lc_sum.ok_or_else(|| {
        Error::Input(format!(
            "batch {:?} has no masked output frames for the contrastive loss",
            batch.ids
        ))
    })?;
    let lc = g.tape.scale(lc_sum, 1.0 / positions as f64);

    let l_ce = ce.map(|v| g.tape.value(v).data[0]);
    let l_c = g.tape.value(lc).data[0];
    let combined_value = joint_loss(batch.kind, l_ce, l_c, alpha)?;

    let root = match (selector, ce) {
        (LossSelector::CrossEntropy, Some(ce)) => ce,
        (LossSelector::Contrastive, _) => lc,
        (LossSelector::Combined, Some(ce)) => {
            if alpha == 1.0 {
                ce
            } else {
                let a = g.tape.scale(ce, alpha);
                let b = g.tape.scale(lc, 1.0 - alpha);
                g.tape.add(a, b)
            }
        }
        (LossSelector::Combined, None) => lc,
        (LossSelector::CrossEntropy, None) => unreachable!("checked above"),
    };
    let value = g.tape.value(root).data[0];
    let grads = g.tape.backward(root);
    let grads = g.tape.param_grads(&grads, params.len());

    Ok(BatchGradients {
        breakdown: LossBreakdown {
            l_ce,
            l_c,
            combined: combined_value,
            num_ce_frames,
            num_contrastive_positions: positions,
            clamp_count,
            batch_kind: batch.kind,
        },
        value,
        grads,
    })
}
