use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::Serialize;
use wavft::eval::{compare_runs, evaluate, EvalReport};
use wavft::features::{
    concat_segments, energy_vad, extract_features, generate_synthetic_corpus, read_labels, read_wav,
    write_features, write_labels, LfbConfig, LfbExtractor, Manifest, ManifestEntry,
};
use wavft::trainer::{self, load_checkpoint, Start, TrainOptions};
use wavft::Utterance;

use crate::config::{digest_of, RunConfig};
use crate::corpus::{self, HELD_OUT, LABELLED, UNLABELLED};
use crate::{ConfigArgs, TrainOverrides, Validation};

fn load_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    RunConfig::load(args.config.as_deref(), args.preset.as_deref(), &args.sets)
}

fn write_effective(out: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let text = format!("# digest: {}\n{}", cfg.digest(), cfg.to_toml());
    fs::write(out.join("config.toml"), text)?;
    Ok(())
}

fn stamp(cfg: &RunConfig, features_digest: &str) -> Vec<(String, String)> {
    vec![
        ("config_digest".into(), cfg.digest()),
        ("features_digest".into(), features_digest.into()),
    ]
}

pub fn extract(args: &ConfigArgs, manifest: &Path, out: &Path, vad: bool) -> anyhow::Result<()> {
    let mut cfg = load_config(args)?;
    cfg.features.vad.enabled |= vad;
    let input = Manifest::read(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let feat_dir = out.join("features");
    let lab_dir = out.join("labels");
    fs::create_dir_all(&feat_dir)?;
    fs::create_dir_all(&lab_dir)?;
    write_effective(out, &cfg)?;

    let results: Vec<anyhow::Result<ManifestEntry>> = input
        .entries
        .par_iter()
        .map(|e| {
            let mut audio = read_wav(&e.path)?;
            if cfg.features.vad.enabled {
                let v = &cfg.features.vad;
                let segments = energy_vad(&audio, v.threshold_db, v.min_segment_ms);
                if segments.is_empty() {
                    bail!("no speech detected");
                }
                audio = concat_segments(&audio, &segments);
            }
            let extractor = LfbExtractor::new(cfg.features.lfb.clone(), audio.sample_rate_hz)?;
            let features = extract_features(&audio, &extractor)?;
            let path = feat_dir.join(format!("{}.wft", e.id));
            write_features(&path, &features)?;
            let label_path = match &e.label_path {
                Some(p) => {
                    let dst = lab_dir.join(format!("{}.lab", e.id));
                    write_labels(&dst, &read_labels(p)?)?;
                    Some(dst)
                }
                None => None,
            };
            Ok(ManifestEntry {
                id: e.id.clone(),
                path,
                label_path,
            })
        })
        .collect();

    let mut entries = Vec::new();
    let mut failures = 0;
    for (e, r) in input.entries.iter().zip(results) {
        match r {
            Ok(entry) => entries.push(entry),
            Err(err) => {
                failures += 1;
                eprintln!("{}: {}: {err:#}", e.id, e.path.display());
            }
        }
    }
    let mut metadata = stamp(&cfg, &cfg.features_digest());
    metadata.push(("vad".into(), cfg.features.vad.enabled.to_string()));
    let out_manifest = Manifest { metadata, entries };
    out_manifest.write(out.join("features.manifest"))?;
    println!(
        "extracted {} of {} utterances into {}",
        out_manifest.entries.len(),
        input.entries.len(),
        out.display()
    );
    if failures > 0 {
        bail!("{failures} utterance(s) failed");
    }
    Ok(())
}

#[derive(Serialize)]
struct BetaReport {
    labelled_utterances: usize,
    unlabelled_utterances: usize,
    held_out_utterances: usize,
    labelled_frames: usize,
    unlabelled_frames: usize,
    beta: f64,
}

pub fn synth(
    args: &ConfigArgs,
    out: &Path,
    seed: Option<u64>,
    labelled: Option<usize>,
    unlabelled: Option<usize>,
    held_out: Option<usize>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(args)?;
    let spec = &mut cfg.data.synth;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = labelled {
        spec.utterances_labelled = n;
    }
    if let Some(n) = unlabelled {
        spec.utterances_unlabelled = n;
    }
    if let Some(n) = held_out {
        spec.utterances_held_out = n;
    }
    cfg.validate()?;
    if cfg.features.lfb != LfbConfig::default() {
        bail!(Validation("synthetic corpora are generated with the default [features.lfb] settings".into()));
    }
    let c = generate_synthetic_corpus(&cfg.data.synth)?;
    write_effective(out, &cfg)?;
    let mut meta = stamp(&cfg, &cfg.features_digest());
    meta.push(("corpus_digest".into(), digest_of(&cfg.data.synth)));
    corpus::write(out, LABELLED, &c.labelled, &meta)?;
    corpus::write(out, UNLABELLED, &c.unlabelled, &meta)?;
    corpus::write(out, HELD_OUT, &c.held_out, &meta)?;
    let report = BetaReport {
        labelled_utterances: c.labelled.len(),
        unlabelled_utterances: c.unlabelled.len(),
        held_out_utterances: c.held_out.len(),
        labelled_frames: corpus::frames(&c.labelled),
        unlabelled_frames: corpus::frames(&c.unlabelled),
        beta: corpus::beta(&c.labelled, &c.unlabelled),
    };
    fs::write(out.join("beta.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "wrote {} labelled, {} unlabelled, {} held-out utterances to {}; beta = {:.3}",
        report.labelled_utterances,
        report.unlabelled_utterances,
        report.held_out_utterances,
        out.display(),
        report.beta
    );
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) -> anyhow::Result<()> {
    if o.baseline {
        if o.alpha.is_some_and(|a| a != 1.0) || o.p.is_some_and(|p| p != 1.0) {
            bail!(Validation("--baseline fixes alpha = 1 and p = 1; drop --alpha/--p".into()));
        }
        cfg.train.alpha = 1.0;
        cfg.train.p = 1.0;
    }
    if let Some(a) = o.alpha {
        cfg.train.alpha = a;
    }
    if let Some(p) = o.p {
        cfg.train.p = p;
    }
    if let Some(s) = o.steps {
        cfg.train.total_steps = s;
    }
    if let Some(b) = o.beta_limit {
        cfg.data.beta_limit = Some(b);
    }
    let seeds = &mut cfg.train.seeds;
    for (slot, v) in [
        (&mut seeds.data, o.seed_data),
        (&mut seeds.mask, o.seed_mask),
        (&mut seeds.distractor, o.seed_distractor),
        (&mut seeds.init, o.seed_init),
    ] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    cfg.validate()
}

fn resolve_corpus(cfg: &mut RunConfig, dir: Option<&Path>) {
    if let Some(d) = dir {
        let set = |slot: &mut Option<PathBuf>, name: &str| {
            if slot.is_none() && d.join(name).exists() {
                *slot = Some(d.join(name));
            }
        };
        set(&mut cfg.data.labelled, LABELLED);
        set(&mut cfg.data.unlabelled, UNLABELLED);
        set(&mut cfg.data.held_out, HELD_OUT);
    }
}

struct Corpora {
    labelled: Vec<Utterance>,
    unlabelled: Vec<Utterance>,
    held_out: Vec<Utterance>,
}

fn load_corpora(cfg: &RunConfig, beta_limit: Option<f64>) -> anyhow::Result<Corpora> {
    let fd = cfg.features_digest();
    let load = |p: &Option<PathBuf>, labels: bool| -> anyhow::Result<Vec<Utterance>> {
        match p {
            Some(p) => corpus::load(p, &fd, labels),
            None => Ok(Vec::new()),
        }
    };
    let labelled = load(&cfg.data.labelled, true)?;
    let mut unlabelled = load(&cfg.data.unlabelled, false)?;
    // Labels on unlabelled-manifest entries are ignored.
    for u in &mut unlabelled {
        u.labels = None;
    }
    if let Some(b) = beta_limit {
        unlabelled = corpus::limit_beta(&labelled, unlabelled, b, cfg.train.seeds.data);
    }
    let held_out = load(&cfg.data.held_out, true)?;
    Ok(Corpora {
        labelled,
        unlabelled,
        held_out,
    })
}

fn checkpoint_id(path: &Path, step: u64) -> String {
    let stem = path.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
    format!("{stem}@{step}")
}

fn write_report(path: &Path, report: &EvalReport) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn train(
    args: &ConfigArgs,
    overrides: &TrainOverrides,
    corpus_dir: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    init: Option<&Path>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(args)?;
    apply_overrides(&mut cfg, overrides)?;
    resolve_corpus(&mut cfg, corpus_dir);
    if cfg.data.labelled.is_none() && cfg.train.p > 0.0 {
        bail!(Validation("no labelled manifest: pass --corpus or set data.labelled".into()));
    }
    let digest = cfg.digest();
    let start = match (resume, init) {
        (Some(p), _) => {
            let ck = load_checkpoint(p)?;
            if ck.config_digest != digest {
                bail!(Validation(format!(
                    "checkpoint {} was written by config {}, current config is {digest}",
                    p.display(),
                    ck.config_digest
                )));
            }
            Start::Resume(ck.state)
        }
        (None, Some(p)) => Start::Params(load_checkpoint(p)?.state.params),
        (None, None) => Start::Fresh,
    };
    let data = load_corpora(&cfg, cfg.data.beta_limit)?;
    write_effective(out, &cfg)?;
    println!(
        "config {digest}: alpha={} p={} steps={} labelled={} unlabelled={} beta={:.3}",
        cfg.train.alpha,
        cfg.train.p,
        cfg.train.total_steps,
        data.labelled.len(),
        data.unlabelled.len(),
        corpus::beta(&data.labelled, &data.unlabelled)
    );
    let opts = TrainOptions {
        checkpoint_dir: Some(out.join("checkpoints")),
        metrics_path: Some(out.join("metrics.jsonl")),
        config_digest: digest.clone(),
        stop_after: None,
    };
    let outcome = trainer::train(&cfg.train, &cfg.model, &data.labelled, &data.unlabelled, start, &opts)?;
    let final_path = out.join("checkpoints").join("final.wftc");
    println!("final checkpoint {}", final_path.display());
    if !data.held_out.is_empty() {
        let report = evaluate(
            &outcome.state.params,
            &data.held_out,
            cfg.eval.batch_size,
            &checkpoint_id(&final_path, outcome.state.step),
            &digest,
        )?;
        write_report(&out.join("eval.json"), &report)?;
        println!("held-out frame accuracy {:.4}", report.frame_accuracy);
    }
    Ok(())
}

pub fn eval(args: &ConfigArgs, checkpoint: &Path, manifest: Option<&Path>, out: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    let ck = load_checkpoint(checkpoint)?;
    let manifest = manifest
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.held_out.clone())
        .ok_or_else(|| Validation("no evaluation manifest: pass --manifest or set data.held_out".into()))?;
    let utts = corpus::load(&manifest, &cfg.features_digest(), true)?;
    let report = evaluate(
        &ck.state.params,
        &utts,
        cfg.eval.batch_size,
        &checkpoint_id(checkpoint, ck.state.step),
        &ck.config_digest,
    )?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => {
            fs::write(p, &json)?;
            println!(
                "{}: frame accuracy {:.4} over {} frames",
                report.checkpoint_id, report.frame_accuracy, report.num_frames
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn read_report(path: &Path) -> anyhow::Result<EvalReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Validation(format!("{}: {e}", path.display())).into())
}

/// `+5.00%` style, always signed.
pub fn format_delta(pct: f64) -> String {
    format!("{pct:+.2}%")
}

pub fn compare(baseline: &Path, candidate: &Path) -> anyhow::Result<()> {
    let a = read_report(baseline)?;
    let b = read_report(candidate)?;
    let c = compare_runs(&a, &b)?;
    println!(
        "baseline {:.4} ({}), candidate {:.4} ({})",
        c.baseline_accuracy, a.checkpoint_id, c.candidate_accuracy, b.checkpoint_id
    );
    println!("absolute delta {:+.4}", c.absolute_delta);
    println!("relative delta {}", format_delta(c.relative_delta_pct));
    for (class, d) in c.per_class_delta.iter().enumerate() {
        if let Some(d) = d {
            println!("  class {class:>4} {d:+.4}");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    name: String,
    alpha: f64,
    p: f64,
    beta_limit: Option<f64>,
    beta: f64,
    frame_accuracy: f64,
    config_digest: String,
}

pub fn sweep(
    args: &ConfigArgs,
    overrides: &TrainOverrides,
    corpus_dir: Option<&Path>,
    out: &Path,
    alphas: &[f64],
    betas: &[f64],
) -> anyhow::Result<()> {
    let mut base = load_config(args)?;
    apply_overrides(&mut base, overrides)?;
    resolve_corpus(&mut base, corpus_dir);
    let mut jobs = Vec::new();
    for &a in alphas {
        let mut c = base.clone();
        c.train.alpha = a;
        jobs.push((format!("alpha-{a}"), c));
    }
    // Varying the unlabelled amount is done with CE-only labelled batches.
    for &b in betas {
        let mut c = base.clone();
        c.train.alpha = 1.0;
        c.data.beta_limit = Some(b);
        jobs.push((format!("beta-{b}"), c));
    }
    for (_, c) in &jobs {
        c.validate()?;
    }
    let full = load_corpora(&base, None)?;
    if full.held_out.is_empty() {
        bail!(Validation("sweep needs a held-out manifest".into()));
    }
    fs::create_dir_all(out)?;
    let rows: Vec<anyhow::Result<SweepRow>> = jobs
        .par_iter()
        .map(|(name, c)| {
            let dir = out.join(name);
            write_effective(&dir, c)?;
            let unlabelled = match c.data.beta_limit {
                Some(b) => corpus::limit_beta(&full.labelled, full.unlabelled.clone(), b, c.train.seeds.data),
                None => full.unlabelled.clone(),
            };
            let digest = c.digest();
            let opts = TrainOptions {
                checkpoint_dir: Some(dir.join("checkpoints")),
                metrics_path: Some(dir.join("metrics.jsonl")),
                config_digest: digest.clone(),
                stop_after: None,
            };
            let o = trainer::train(&c.train, &c.model, &full.labelled, &unlabelled, Start::Fresh, &opts)?;
            let report = evaluate(
                &o.state.params,
                &full.held_out,
                c.eval.batch_size,
                &checkpoint_id(&dir.join("checkpoints/final.wftc"), o.state.step),
                &digest,
            )?;
            write_report(&dir.join("eval.json"), &report)?;
            Ok(SweepRow {
                name: name.clone(),
                alpha: c.train.alpha,
                p: c.train.p,
                beta_limit: c.data.beta_limit,
                beta: corpus::beta(&full.labelled, &unlabelled),
                frame_accuracy: report.frame_accuracy,
                config_digest: digest,
            })
        })
        .collect();
    let rows = rows.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
    fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&rows)?)?;
    println!("{:<14} {:>6} {:>5} {:>7} {:>9}", "run", "alpha", "p", "beta", "accuracy");
    for r in &rows {
        println!(
            "{:<14} {:>6.2} {:>5.2} {:>7.3} {:>9.4}",
            r.name, r.alpha, r.p, r.beta, r.frame_accuracy
        );
    }
    Ok(())
}
