//! Feature files, label files and manifests.
//!
//! Feature file layout (little-endian): `b"WFT1"`, `u32` rows, `u32` dim,
//! then `rows * dim` `f32` values in row-major order.
//!
//! Manifests are UTF-8 with one `id<TAB>path[<TAB>label_path]` record per
//! line. Lines starting with `#` carry metadata such as the config digest.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const FEATURE_MAGIC: &[u8; 4] = b"WFT1";

pub fn write_features(path: impl AsRef<Path>, features: &FeatureMatrix) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(features.num_frames() as u32).to_le_bytes())?;
    w.write_all(&(features.dim() as u32).to_le_bytes())?;
    for &v in &features.frames.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature file. The hop is not stored; callers supply it.
pub fn read_features(path: impl AsRef<Path>, frame_hop_ms: f64) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format(format!(
            "{}: missing WFT1 header",
            path.display()
        )));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + rows * dim * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes for {rows}x{dim}, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect::<Vec<_>>();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!(
            "{}: non-finite feature value",
            path.display()
        )));
    }
    Ok(FeatureMatrix {
        frames: Mat::from_vec(rows, dim, data),
        frame_hop_ms,
    })
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let text = labels
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    fs::read_to_string(path)?
        .split_whitespace()
        .map(|tok| {
            tok.parse::<usize>().map_err(|_| {
                Error::Format(format!("{}: bad label {tok:?}", path.display()))
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    /// `key: value` pairs from `#` header lines.
    pub metadata: Vec<(String, String)>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut manifest = Manifest::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once(':') {
                    manifest
                        .metadata
                        .push((k.trim().to_string(), v.trim().to_string()));
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(2..=3).contains(&fields.len()) || fields[0].is_empty() || fields[1].is_empty() {
                return Err(Error::Format(format!(
                    "manifest line {}: expected id<TAB>path[<TAB>labels]",
                    lineno + 1
                )));
            }
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_absolute() {
                    p
                } else {
                    base_dir.join(p)
                }
            };
            manifest.entries.push(ManifestEntry {
                id: fields[0].to_string(),
                path: resolve(fields[1]),
                label_path: fields.get(2).filter(|s| !s.is_empty()).map(|s| resolve(s)),
            });
        }
        Ok(manifest)
    }

    /// Reads a manifest; relative paths resolve against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Manifest::parse(&text, base)
    }

    pub fn metadata(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Serializes with paths written relative to `base_dir` where possible.
    pub fn render(&self, base_dir: &Path) -> String {
        let rel = |p: &Path| {
            p.strip_prefix(base_dir)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut out = String::new();
        for (k, v) in &self.metadata {
            out.push_str(&format!("# {k}: {v}\n"));
        }
        for e in &self.entries {
            out.push_str(&e.id);
            out.push('\t');
            out.push_str(&rel(&e.path));
            if let Some(l) = &e.label_path {
                out.push('\t');
                out.push_str(&rel(l));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        fs::write(path, self.render(base))?;
        Ok(())
    }
}
