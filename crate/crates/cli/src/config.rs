//! Run configuration: preset, then config file, then flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use wavft::data::MaskPolicy;
use wavft::features::{LfbConfig, SyntheticCorpusSpec};
use wavft::trainer::TrainConfig;
use wavft::{ContrastiveConfig, ModelConfig};

use crate::Validation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VadConfig {
    pub enabled: bool,
    pub threshold_db: f64,
    pub min_segment_ms: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        VadConfig {
            enabled: false,
            threshold_db: -30.0,
            min_segment_ms: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesSection {
    pub lfb: LfbConfig,
    pub vad: VadConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub labelled: Option<PathBuf>,
    pub unlabelled: Option<PathBuf>,
    pub held_out: Option<PathBuf>,
    /// Cap on unlabelled/labelled frame ratio; unlabelled utterances are
    /// subsampled to fit.
    pub beta_limit: Option<f64>,
    pub synth: SyntheticCorpusSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { batch_size: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub features: FeaturesSection,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn preset(name: &str) -> anyhow::Result<Self> {
        let desk = RunConfig {
            preset: "desk".into(),
            features: FeaturesSection::default(),
            data: DataSection::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        };
        match name {
            "desk" => Ok(desk),
            "paper" => Ok(RunConfig {
                preset: "paper".into(),
                model: ModelConfig::paper(),
                train: TrainConfig {
                    mask: MaskPolicy {
                        span: 10,
                        ..MaskPolicy::default()
                    },
                    contrastive: ContrastiveConfig {
                        num_distractors: 100,
                        ..ContrastiveConfig::default()
                    },
                    batch_size: 32,
                    total_steps: 100_000,
                    ..TrainConfig::default()
                },
                ..desk
            }),
            other => Err(Validation(format!("unknown preset {other:?} (expected desk or paper)")).into()),
        }
    }

    /// Builds the effective config. The file may name its own preset; the
    /// flag wins when both are given.
    pub fn load(file: Option<&Path>, preset: Option<&str>, sets: &[String]) -> anyhow::Result<Self> {
        let file_table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let v: toml::Table = toml::from_str(&text)
                    .map_err(|e| Validation(format!("{}: {e}", p.display())))?;
                Some(v)
            }
            None => None,
        };
        let preset_name = preset
            .map(str::to_string)
            .or_else(|| {
                file_table
                    .as_ref()
                    .and_then(|t| t.get("preset"))
                    .and_then(|v| v.as_str().map(str::to_string))
            })
            .unwrap_or_else(|| "desk".into());
        let base = RunConfig::preset(&preset_name)?;
        let mut value = toml::Value::try_from(&base)?;
        if let Some(t) = file_table {
            merge(&mut value, toml::Value::Table(t));
        }
        for s in sets {
            apply_set(&mut value, s)?;
        }
        if let Some(t) = value.as_table_mut() {
            t.insert("preset".into(), toml::Value::String(preset_name));
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Validation(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let v = |r: wavft::Result<()>| r.map_err(|e| anyhow::Error::from(Validation(e.to_string())));
        v(self.features.lfb.validate())?;
        v(self.model.validate())?;
        v(self.train.validate())?;
        v(self.data.synth.validate())?;
        if self.model.input_dim != 2 * self.features.lfb.n_mels {
            bail!(Validation(format!(
                "model input_dim {} must be twice n_mels {}",
                self.model.input_dim, self.features.lfb.n_mels
            )));
        }
        if self.data.synth.num_classes != self.model.num_classes {
            bail!(Validation(format!(
                "synthetic corpus has {} classes but the model has {}",
                self.data.synth.num_classes, self.model.num_classes
            )));
        }
        if let Some(b) = self.data.beta_limit {
            if !(b >= 0.0) {
                bail!(Validation("beta_limit must be non-negative".into()));
            }
        }
        if self.eval.batch_size == 0 {
            bail!(Validation("eval batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Content hash of the whole effective config.
    pub fn digest(&self) -> String {
        digest_of(self)
    }

    /// Content hash of the feature pipeline alone; corpora carry it so that
    /// training can reject features computed with different settings.
    pub fn features_digest(&self) -> String {
        digest_of(&self.features.lfb)
    }
}

pub fn digest_of<T: Serialize>(v: &T) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(v).expect("config serializes");
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Applies `section.key=value`, parsing the value as TOML (bare words fall
/// back to strings).
pub fn apply_set(root: &mut toml::Value, assignment: &str) -> anyhow::Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Validation(format!("override {assignment:?} is not key=value")))?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut cur = root;
    for k in &keys[..keys.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Validation(format!("{path}: {k} is not a section")))?;
        cur = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| Validation(format!("{path}: parent is not a section")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
