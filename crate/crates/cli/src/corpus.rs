//! Loading and writing manifest-described corpora.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::seq::SliceRandom;
use wavft::features::{read_features, read_labels, write_features, write_labels, Manifest, ManifestEntry};
use wavft::rng::{stream, Stream};
use wavft::Utterance;

use crate::Validation;

pub const LABELLED: &str = "labelled.manifest";
pub const UNLABELLED: &str = "unlabelled.manifest";
pub const HELD_OUT: &str = "held_out.manifest";

/// Stacked feature rows are 20 ms apart at the canonical front end.
const FRAME_HOP_MS: f64 = 20.0;

pub fn load(manifest_path: &Path, features_digest: &str, require_labels: bool) -> anyhow::Result<Vec<Utterance>> {
    let manifest = Manifest::read(manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?;
    if let Some(d) = manifest.metadata("features_digest") {
        if d != features_digest {
            anyhow::bail!(Validation(format!(
                "{} was built with feature settings {d}, current settings are {features_digest}",
                manifest_path.display()
            )));
        }
    }
    manifest
        .entries
        .iter()
        .map(|e| {
            let features = read_features(&e.path, FRAME_HOP_MS)
                .with_context(|| format!("reading features for {}", e.id))?;
            let labels = match &e.label_path {
                Some(p) => Some(read_labels(p).with_context(|| format!("reading labels for {}", e.id))?),
                None if require_labels => {
                    anyhow::bail!(Validation(format!("{} has no label file", e.id)))
                }
                None => None,
            };
            Ok(Utterance {
                id: e.id.clone(),
                features,
                labels,
            })
        })
        .collect()
}

/// Writes features (and labels when present) under `dir` plus a manifest.
pub fn write(
    dir: &Path,
    name: &str,
    utterances: &[Utterance],
    metadata: &[(String, String)],
) -> anyhow::Result<PathBuf> {
    let feat_dir = dir.join("features");
    let lab_dir = dir.join("labels");
    fs::create_dir_all(&feat_dir)?;
    fs::create_dir_all(&lab_dir)?;
    let mut entries = Vec::with_capacity(utterances.len());
    for u in utterances {
        let path = feat_dir.join(format!("{}.wft", u.id));
        write_features(&path, &u.features)?;
        let label_path = match &u.labels {
            Some(l) => {
                let p = lab_dir.join(format!("{}.lab", u.id));
                write_labels(&p, l)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: u.id.clone(),
            path,
            label_path,
        });
    }
    let manifest = Manifest {
        metadata: metadata.to_vec(),
        entries,
    };
    let path = dir.join(name);
    manifest.write(&path)?;
    Ok(path)
}

pub fn frames(utterances: &[Utterance]) -> usize {
    utterances.iter().map(|u| u.features.num_frames()).sum()
}

/// Unlabelled-to-labelled frame ratio; frames stand in for hours.
pub fn beta(labelled: &[Utterance], unlabelled: &[Utterance]) -> f64 {
    let l = frames(labelled);
    if l == 0 {
        0.0
    } else {
        frames(unlabelled) as f64 / l as f64
    }
}

/// Random subset of `unlabelled` holding at most `limit` times the labelled
/// frames, drawn with `seed`.
pub fn limit_beta(labelled: &[Utterance], unlabelled: Vec<Utterance>, limit: f64, seed: u64) -> Vec<Utterance> {
    let budget = (limit * frames(labelled) as f64).floor() as usize;
    let mut order: Vec<usize> = (0..unlabelled.len()).collect();
    order.shuffle(&mut stream(seed, Stream::Corpus, u64::MAX));
    let mut keep = vec![false; unlabelled.len()];
    let mut used = 0;
    for i in order {
        let n = unlabelled[i].features.num_frames();
        if used + n <= budget {
            used += n;
            keep[i] = true;
        }
    }
    unlabelled
        .into_iter()
        .zip(keep)
        .filter_map(|(u, k)| k.then_some(u))
        .collect()
}
