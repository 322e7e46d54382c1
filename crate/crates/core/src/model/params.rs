use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use super::config::{ModelConfig, SUBSAMPLE_KERNEL};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Zeros,
    Ones,
    Normal,
}

/// Name, shape and initializer of every tensor, in storage order.
fn layout(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let (i, d, h, f, k, c, e) = (
        cfg.input_dim,
        cfg.model_dim,
        cfg.num_heads,
        cfg.ffn_dim,
        cfg.conv_kernel,
        cfg.num_classes,
        cfg.context_dim,
    );
    let mut out = Vec::new();
    let mut push = |name: String, r: usize, cc: usize, init: Init| out.push((name, r, cc, init));
    push("mask_vector".into(), 1, i, Init::Normal);
    push("subsample.weight".into(), SUBSAMPLE_KERNEL * i, d, Init::Normal);
    push("subsample.bias".into(), 1, d, Init::Zeros);
    for b in 0..cfg.num_blocks {
        let p = |s: &str| format!("blocks.{b}.{s}");
        push(p("attn_norm.gamma"), 1, d, Init::Ones);
        push(p("attn_norm.beta"), 1, d, Init::Zeros);
        for m in ["query", "key", "value", "out"] {
            push(p(&format!("attn.{m}.weight")), d, d, Init::Normal);
            push(p(&format!("attn.{m}.bias")), 1, d, Init::Zeros);
        }
        push(p("attn.rel_bias"), h, 2 * cfg.max_rel_dist + 1, Init::Zeros);
        push(p("conv_norm.gamma"), 1, d, Init::Ones);
        push(p("conv_norm.beta"), 1, d, Init::Zeros);
        push(p("conv.depthwise.weight"), k, d, Init::Normal);
        push(p("conv.depthwise.bias"), 1, d, Init::Zeros);
        push(p("conv.pointwise.weight"), d, d, Init::Normal);
        push(p("conv.pointwise.bias"), 1, d, Init::Zeros);
        push(p("ffn_norm.gamma"), 1, d, Init::Ones);
        push(p("ffn_norm.beta"), 1, d, Init::Zeros);
        push(p("ffn.in.weight"), d, f, Init::Normal);
        push(p("ffn.in.bias"), 1, f, Init::Zeros);
        push(p("ffn.out.weight"), f, d, Init::Normal);
        push(p("ffn.out.bias"), 1, d, Init::Zeros);
    }
    push("final_norm.gamma".into(), 1, d, Init::Ones);
    push("final_norm.beta".into(), 1, d, Init::Zeros);
    push("proj.weight".into(), d, c, Init::Zeros);
    push("proj.bias".into(), 1, c, Init::Zeros);
    push("context.in.weight".into(), d, d, Init::Normal);
    push("context.in.bias".into(), 1, d, Init::Zeros);
    push("context.out.weight".into(), d, e, Init::Normal);
    push("context.out.bias".into(), 1, e, Init::Zeros);
    push("target.weight".into(), i, e, Init::Normal);
    push("target.bias".into(), 1, e, Init::Zeros);
    out
}

/// Parameters belonging to the contrastive branch only; inference never reads them.
pub const CONTRASTIVE_ONLY: [&str; 7] = [
    "mask_vector",
    "context.in.weight",
    "context.in.bias",
    "context.out.weight",
    "context.out.bias",
    "target.weight",
    "target.bias",
];

/// Named model tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    pub tensors: Vec<Mat>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    /// Truncated-normal (±2σ) weights, zero biases, unit layer-norm scales.
    /// The output projection starts at zero, so an untrained head emits
    /// uniform posteriors.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let std = config.init_std;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, r, c, init) in layout(config) {
            let m = match init {
                Init::Zeros => Mat::zeros(r, c),
                Init::Ones => Mat::filled(r, c, 1.0),
                Init::Normal => Mat::from_vec(
                    r,
                    c,
                    (0..r * c).map(|_| truncated_normal(rng) * std).collect(),
                ),
            };
            names.push(name);
            tensors.push(m);
        }
        Ok(Self::assemble(config.clone(), names, tensors))
    }

    fn assemble(config: ModelConfig, names: Vec<String>, tensors: Vec<Mat>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ModelParams {
            config,
            names,
            tensors,
            index,
        }
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Mat)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(config);
        if expected.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut map: BTreeMap<String, Mat> = BTreeMap::new();
        for (n, m) in named {
            if map.insert(n.clone(), m).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {n}")));
            }
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, r, c, _) in expected {
            let m = map
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if m.shape() != (r, c) {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    m.shape(),
                    (r, c)
                )));
            }
            if !m.is_finite() {
                return Err(Error::Checkpoint(format!("parameter {name} is not finite")));
            }
            names.push(name);
            tensors.push(m);
        }
        Ok(Self::assemble(config.clone(), names, tensors))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|m| m.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// Scalar count implied by a config, without allocating.
pub fn param_count(cfg: &ModelConfig) -> usize {
    layout(cfg).iter().map(|(_, r, c, _)| r * c).sum()
}

fn truncated_normal(rng: &mut Rng) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= 2.0 {
            return v;
        }
    }
}
