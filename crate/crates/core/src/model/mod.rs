//! The acoustic model.
//!
//! ```text
//! features (T' x 160) ──mask──▶ conv subsample (k=3, s=2) ──▶ N x block ──▶ LN ──▶ z_t
//!     │                                                                     ├─▶ proj ▶ softmax ▶ ŷ_t
//!     │                                                                     └─▶ FFN head ▶ c_t
//!     └── rows 2t+1, unmasked ──▶ linear ▶ q_t
//!
//! block: x += MHSA(LN x) ; x += GELU(pointwise(depthwise(LN x))) ; x += FFN(LN x)
//! ```
//!
//! Every batch element is processed at the padded length; padding is kept
//! out of attention keys and depthwise convolution inputs, so valid frames do
//! not depend on how much padding follows them.

mod config;
mod params;

pub use config::{output_frames, target_row, ModelConfig, SUBSAMPLE_KERNEL, SUBSAMPLE_STRIDE};
pub use params::{param_count, ModelParams, CONTRASTIVE_ONLY};

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Mat;

/// Which heads to build, and the dropout generator when training.
pub struct ForwardOptions<'a> {
    pub classify: bool,
    pub contrastive: bool,
    pub dropout_rng: Option<&'a mut Rng>,
}

impl ForwardOptions<'_> {
    pub fn all() -> Self {
        ForwardOptions {
            classify: true,
            contrastive: true,
            dropout_rng: None,
        }
    }

    pub fn inference() -> Self {
        ForwardOptions {
            classify: true,
            contrastive: false,
            dropout_rng: None,
        }
    }
}

/// A recorded forward pass.
pub struct Graph {
    pub tape: Tape,
    /// Output frames per utterance before padding.
    pub out_lens: Vec<usize>,
    pub logits: Vec<Var>,
    pub contexts: Vec<Var>,
    pub targets: Vec<Var>,
    /// Masked valid output frames per utterance.
    pub masked_positions: Vec<Vec<usize>>,
}

/// Plain values of a forward pass. Per-utterance matrices are padded to the
/// batch's longest output; `out_lens` gives the valid prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub posteriors: Vec<Mat>,
    pub contexts: Vec<Mat>,
    pub targets: Vec<Mat>,
    pub masked_positions: Vec<Vec<usize>>,
    pub out_lens: Vec<usize>,
}

struct Builder<'p> {
    params: &'p ModelParams,
    tape: Tape,
    leaves: Vec<Option<Var>>,
}

impl Builder<'_> {
    fn p(&mut self, name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = self.leaves[idx] {
            return v;
        }
        let v = self.tape.param(idx, self.params.tensors[idx].clone());
        self.leaves[idx] = Some(v);
        v
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.weight"));
        let b = self.p(&format!("{prefix}.bias"));
        self.tape.linear(x, w, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Var {
        let g = self.p(&format!("{prefix}.gamma"));
        let b = self.p(&format!("{prefix}.beta"));
        self.tape.layer_norm(x, g, b)
    }

    fn dropout(&mut self, x: Var, rate: f64, rng: &mut Option<&mut Rng>) -> Var {
        let Some(rng) = rng.as_deref_mut() else {
            return x;
        };
        if rate == 0.0 {
            return x;
        }
        let (r, c) = self.tape.value(x).shape();
        let keep = 1.0 - rate;
        let mask = Mat::from_vec(
            r,
            c,
            (0..r * c)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        );
        self.tape.mul_const(x, mask)
    }

    fn block(&mut self, h: Var, b: usize, valid: usize, rng: &mut Option<&mut Rng>) -> Var {
        let cfg = self.params.config.clone();
        let p = |s: &str| format!("blocks.{b}.{s}");

        let a = self.norm(h, &p("attn_norm"));
        let q = self.linear(a, &p("attn.query"));
        let k = self.linear(a, &p("attn.key"));
        let v = self.linear(a, &p("attn.value"));
        let rel = self.p(&p("attn.rel_bias"));
        let att = self
            .tape
            .attention(q, k, v, rel, cfg.num_heads, cfg.max_rel_dist, valid);
        let o = self.linear(att, &p("attn.out"));
        let o = self.dropout(o, cfg.dropout, rng);
        let h = self.tape.add(h, o);

        let a = self.norm(h, &p("conv_norm"));
        let w = self.p(&p("conv.depthwise.weight"));
        let bias = self.p(&p("conv.depthwise.bias"));
        let d = self.tape.depthwise_conv(a, w, bias, valid);
        let d = self.linear(d, &p("conv.pointwise"));
        let d = self.tape.gelu(d);
        let d = self.dropout(d, cfg.dropout, rng);
        let h = self.tape.add(h, d);

        let a = self.norm(h, &p("ffn_norm"));
        let f = self.linear(a, &p("ffn.in"));
        let f = self.tape.gelu(f);
        let f = self.linear(f, &p("ffn.out"));
        let f = self.dropout(f, cfg.dropout, rng);
        self.tape.add(h, f)
    }
}

/// Records the forward pass of `batch` (masked according to its plans).
pub fn build_graph(params: &ModelParams, batch: &Batch, mut opts: ForwardOptions<'_>) -> Result<Graph> {
    let cfg = &params.config;
    let max_len = batch.max_len();
    if let Some(f) = batch.features.first() {
        if f.cols != cfg.input_dim {
            return Err(Error::Shape(format!(
                "features have dim {} but the model expects {}",
                f.cols, cfg.input_dim
            )));
        }
    }
    let padded_out = output_frames(max_len);
    let mut out_lens = Vec::with_capacity(batch.len());
    for (b, &valid) in batch.valid_lens.iter().enumerate() {
        let n = output_frames(valid);
        if n == 0 {
            return Err(Error::TooShort(format!(
                "utterance {} has {valid} frames; the subsampling convolution needs {SUBSAMPLE_KERNEL}",
                batch.ids[b]
            )));
        }
        out_lens.push(n);
    }
    if let Some(labels) = &batch.labels {
        for (b, l) in labels.iter().enumerate() {
            if l.len() != out_lens[b] {
                return Err(Error::Alignment(format!(
                    "utterance {} has {} labels but the model emits {} frames",
                    batch.ids[b],
                    l.len(),
                    out_lens[b]
                )));
            }
            if let Some(c) = l.iter().find(|&&c| c >= cfg.num_classes) {
                return Err(Error::Alignment(format!(
                    "utterance {} has label {c} outside [0, {})",
                    batch.ids[b], cfg.num_classes
                )));
            }
        }
    }

    let mut bld = Builder {
        params,
        tape: Tape::new(),
        leaves: vec![None; params.len()],
    };
    let mut graph_logits = Vec::new();
    let mut graph_contexts = Vec::new();
    let mut graph_targets = Vec::new();
    let mut masked_positions = Vec::new();

    for b in 0..batch.len() {
        let valid = batch.valid_lens[b];
        let plan = &batch.mask_plans[b];
        let mask: Vec<bool> = (0..max_len)
            .map(|t| t < valid && plan.masked.get(t).copied().unwrap_or(false))
            .collect();
        let mut x = bld.tape.constant(batch.features[b].clone());
        if mask.contains(&true) {
            let fill = bld.p("mask_vector");
            x = bld.tape.mask_fill(x, fill, mask.clone());
        }
        let u = bld.tape.unfold(x, SUBSAMPLE_KERNEL, SUBSAMPLE_STRIDE);
        let h = bld.linear(u, "subsample");
        let mut h = bld.tape.gelu(h);
        let trunk_valid = out_lens[b];
        for blk in 0..cfg.num_blocks {
            h = bld.block(h, blk, trunk_valid, &mut opts.dropout_rng);
        }
        let z = bld.norm(h, "final_norm");

        if opts.classify {
            graph_logits.push(bld.linear(z, "proj"));
        }
        if opts.contrastive {
            let c = bld.linear(z, "context.in");
            let c = bld.tape.gelu(c);
            graph_contexts.push(bld.linear(c, "context.out"));

            let feats = &batch.features[b];
            let mut rows = Mat::zeros(padded_out, cfg.input_dim);
            for t in 0..padded_out {
                rows.row_mut(t).copy_from_slice(feats.row(target_row(t)));
            }
            let rows = bld.tape.constant(rows);
            graph_targets.push(bld.linear(rows, "target"));
        }
        masked_positions.push(
            (0..trunk_valid)
                .filter(|&t| mask[target_row(t)])
                .collect::<Vec<_>>(),
        );
    }

    Ok(Graph {
        tape: bld.tape,
        out_lens,
        logits: graph_logits,
        contexts: graph_contexts,
        targets: graph_targets,
        masked_positions,
    })
}

/// Runs every head and returns plain values.
pub fn forward(params: &ModelParams, batch: &Batch) -> Result<ForwardOutput> {
    let g = build_graph(params, batch, ForwardOptions::all())?;
    Ok(ForwardOutput {
        posteriors: g.logits.iter().map(|&v| g.tape.value(v).softmax_rows()).collect(),
        contexts: g.contexts.iter().map(|&v| g.tape.value(v).clone()).collect(),
        targets: g.targets.iter().map(|&v| g.tape.value(v).clone()).collect(),
        masked_positions: g.masked_positions,
        out_lens: g.out_lens,
    })
}
