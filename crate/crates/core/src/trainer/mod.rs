//! The training loop: batch sampling, masking, the joint objective, Adam
//! with a warmup/decay schedule, metrics and checkpoints.

mod adam;
mod checkpoint;
mod objective;
mod schedule;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, Checkpoint};
pub use objective::{batch_objective, BatchGradients, LossSelector};
pub use schedule::{lr_at_step, warmup_steps};

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, BatchKind, BatchStreams, MaskPolicy, SamplerConfig};
use crate::error::{Error, Result};
use crate::features::Utterance;
use crate::losses::ContrastiveConfig;
use crate::model::{output_frames, ModelConfig, ModelParams};
use crate::rng::{stream, Stream};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Batch-kind draws and corpus shuffling.
    pub data: u64,
    /// Time masks and dropout.
    pub mask: u64,
    pub distractor: u64,
    pub init: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 1,
            mask: 2,
            distractor: 3,
            init: 4,
        }
    }
}

impl Seeds {
    /// All four seeds derived from one number.
    pub fn from_base(base: u64) -> Self {
        Seeds {
            data: base.wrapping_mul(4),
            mask: base.wrapping_mul(4) + 1,
            distractor: base.wrapping_mul(4) + 2,
            init: base.wrapping_mul(4) + 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of cross entropy on labelled batches.
    pub alpha: f64,
    /// Probability that a step draws a labelled batch.
    pub p: f64,
    pub total_steps: u64,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub seeds: Seeds,
    pub contrastive: ContrastiveConfig,
    pub mask: MaskPolicy,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: u64,
    /// Unlabelled-to-labelled frame ratio, recorded in run metadata only.
    pub beta: Option<f64>,
    /// Batches prepared ahead on a worker thread; 0 prepares them inline.
    pub prefetch_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            p: 0.5,
            total_steps: 1200,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            batch_size: 8,
            seeds: Seeds::default(),
            contrastive: ContrastiveConfig::default(),
            mask: MaskPolicy::default(),
            adam: AdamConfig::default(),
            grad_clip: None,
            checkpoint_every: 0,
            beta: None,
            prefetch_depth: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("p {} outside [0, 1]", self.p)));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if let Some(b) = self.beta {
            if !(b > 0.0) {
                return Err(Error::Config("beta must be positive".into()));
            }
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        self.contrastive.validate()?;
        self.mask.validate()
    }

    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            p: self.p,
            seed: self.seeds.data,
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed update steps.
    pub step: u64,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Labelled and unlabelled batches consumed so far.
    pub cursors: (u64, u64),
}

impl TrainState {
    pub fn fresh(params: ModelParams) -> Self {
        let adam = AdamState::new(&params);
        TrainState {
            step: 0,
            params,
            adam,
            cursors: (0, 0),
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub batch_kind: BatchKind,
    pub l_ce: Option<f64>,
    pub l_c: f64,
    pub combined: f64,
    pub lr: f64,
    pub clamp_count: usize,
    pub wall_ms: f64,
}

/// Where training starts from.
pub enum Start {
    /// Parameters initialised from `seeds.init`.
    Fresh,
    /// Given initial parameters, fresh optimizer.
    Params(ModelParams),
    /// Continue a saved run.
    Resume(TrainState),
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoints go to `<dir>/step-NNNNNN.wftc` and `<dir>/final.wftc`.
    pub checkpoint_dir: Option<PathBuf>,
    /// JSON-lines metrics file, appended to when resuming.
    pub metrics_path: Option<PathBuf>,
    pub config_digest: String,
    /// Stop after this step even if `total_steps` is larger.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
}

/// Checks the corpora against the model before any step runs.
pub fn validate_corpora(model: &ModelConfig, labelled: &[Utterance], unlabelled: &[Utterance]) -> Result<()> {
    for u in labelled.iter().chain(unlabelled) {
        if u.features.dim() != model.input_dim {
            return Err(Error::Shape(format!(
                "utterance {} has feature dim {}, model expects {}",
                u.id,
                u.features.dim(),
                model.input_dim
            )));
        }
        let n = output_frames(u.features.num_frames());
        if n < 2 {
            return Err(Error::TooShort(format!(
                "utterance {} yields {n} output frames; training needs at least 2",
                u.id
            )));
        }
    }
    for u in labelled {
        u.validate_labels(model.num_classes, output_frames(u.features.num_frames()))?;
    }
    Ok(())
}

fn prepare(streams: &mut BatchStreams<'_>, cfg: &TrainConfig, step: u64) -> Result<(Batch, (u64, u64))> {
    let mut batch = streams.next(step)?;
    batch.plan_masks(&cfg.mask, &mut stream(cfg.seeds.mask, Stream::Mask, step));
    Ok((batch, streams.cursors))
}

fn clip(grads: &mut [Option<Mat>], max_norm: f64) {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data.iter())
        .map(|v| v * v)
        .sum();
    let n = sq.sqrt();
    if n > max_norm {
        for g in grads.iter_mut().flatten() {
            g.scale(max_norm / n);
        }
    }
}

/// Runs steps `state.step + 1 ..= total_steps`.
///
/// Every random draw at step `s` comes from a generator keyed by `s`, and
/// batches come from the cursors stored in the state, so a resumed run
/// reproduces the uninterrupted one exactly.
pub fn train(
    cfg: &TrainConfig,
    model: &ModelConfig,
    labelled: &[Utterance],
    unlabelled: &[Utterance],
    start: Start,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let resuming = matches!(start, Start::Resume(_));
    let mut state = match start {
        Start::Fresh => TrainState::fresh(ModelParams::init(
            model,
            &mut stream(cfg.seeds.init, Stream::Init, 0),
        )?),
        Start::Params(p) => TrainState::fresh(p),
        Start::Resume(s) => s,
    };
    if &state.params.config != model {
        return Err(Error::Config("initial parameters were built for a different model config".into()));
    }
    if state.step > cfg.total_steps {
        return Err(Error::Config(format!(
            "checkpoint is at step {} beyond total_steps {}",
            state.step, cfg.total_steps
        )));
    }
    validate_corpora(model, labelled, unlabelled)?;
    let mut streams = BatchStreams::new(cfg.sampler(), labelled, unlabelled, cfg.batch_size, cfg.seeds.data)?;
    streams.cursors = state.cursors;

    let mut metrics_out = match &opts.metrics_path {
        Some(p) => {
            let f = if resuming {
                OpenOptions::new().create(true).append(true).open(p)?
            } else {
                File::create(p)?
            };
            Some(BufWriter::new(f))
        }
        None => None,
    };
    if let Some(d) = &opts.checkpoint_dir {
        fs::create_dir_all(d)?;
    }

    let first = state.step + 1;
    let last = opts.stop_after.map_or(cfg.total_steps, |s| s.min(cfg.total_steps));
    let mut metrics = Vec::new();

    let mut run_step = |state: &mut TrainState, step: u64, batch: Batch, cursors: (u64, u64)| -> Result<()> {
        let t0 = Instant::now();
        let mut dropout = stream(cfg.seeds.mask, Stream::Dropout, step);
        let dropout_rng = (model.dropout > 0.0).then_some(&mut dropout);
        let mut out = batch_objective(
            &state.params,
            &batch,
            cfg.alpha,
            &cfg.contrastive,
            LossSelector::Combined,
            &mut stream(cfg.seeds.distractor, Stream::Distractor, step),
            dropout_rng,
        )?;
        if !out.value.is_finite() {
            return Err(Error::Numerical(format!("loss is {} at step {step}", out.value)));
        }
        if let Some(c) = cfg.grad_clip {
            clip(&mut out.grads, c);
        }
        let lr = lr_at_step(step, cfg.total_steps, cfg.peak_lr, cfg.warmup_fraction);
        adam_step(&mut state.params, &mut state.adam, &out.grads, lr, &cfg.adam)?;
        state.step = step;
        state.cursors = cursors;
        let b = out.breakdown;
        let m = StepMetrics {
            step,
            batch_kind: b.batch_kind,
            l_ce: b.l_ce,
            l_c: b.l_c,
            combined: b.combined,
            lr,
            clamp_count: b.clamp_count,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(w) = metrics_out.as_mut() {
            serde_json::to_writer(&mut *w, &m).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        metrics.push(m);
        if let Some(d) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                save_checkpoint(&d.join(format!("step-{step:06}.wftc")), state, &opts.config_digest)?;
            }
        }
        Ok(())
    };

    if cfg.prefetch_depth == 0 {
        for step in first..=last {
            let (batch, cursors) = prepare(&mut streams, cfg, step)?;
            run_step(&mut state, step, batch, cursors)?;
        }
    } else {
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel(cfg.prefetch_depth);
            scope.spawn(move || {
                for step in first..=last {
                    let item = prepare(&mut streams, cfg, step);
                    let failed = item.is_err();
                    if tx.send(item).is_err() || failed {
                        break;
                    }
                }
            });
            for step in first..=last {
                let (batch, cursors) = rx
                    .recv()
                    .map_err(|_| Error::Input("batch producer stopped early".into()))??;
                run_step(&mut state, step, batch, cursors)?;
            }
            Ok(())
        })?;
    }

    if let Some(mut w) = metrics_out {
        w.flush()?;
    }
    if let Some(d) = &opts.checkpoint_dir {
        if state.step == cfg.total_steps {
            save_checkpoint(&d.join("final.wftc"), &state, &opts.config_digest)?;
        }
    }
    Ok(TrainOutcome { state, metrics })
}
