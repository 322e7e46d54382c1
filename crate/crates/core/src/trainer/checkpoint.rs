//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "WFTC" u32:version
//! u32:len model-config JSON
//! u32:len config digest
//! u64:step u64:adam_step u64:labelled_cursor u64:unlabelled_cursor
//! u32:n  n x tensor        parameters
//! u32:n  n x tensor        first moments (same names)
//! u32:n  n x tensor        second moments
//! tensor = u32:len name, u32:rank, rank x u32:dim, f64 data
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{AdamState, TrainState};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Mat;

const MAGIC: &[u8; 4] = b"WFTC";
const VERSION: u32 = 1;

/// A decoded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    /// Digest of the run configuration that produced it.
    pub config_digest: String,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, name: &str, m: &Mat) {
    put_bytes(out, name.as_bytes());
    put_u32(out, 2);
    put_u32(out, m.rows as u32);
    put_u32(out, m.cols as u32);
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(state: &TrainState, config_digest: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let cfg = serde_json::to_vec(&state.params.config)
        .map_err(|e| Error::Checkpoint(format!("encoding model config: {e}")))?;
    put_bytes(&mut out, &cfg);
    put_bytes(&mut out, config_digest.as_bytes());
    for v in [state.step, state.adam.step, state.cursors.0, state.cursors.1] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let names = state.params.names();
    for tensors in [&state.params.tensors, &state.adam.m, &state.adam.v] {
        put_u32(&mut out, tensors.len() as u32);
        for (n, t) in names.iter().zip(tensors.iter()) {
            put_tensor(&mut out, n, t);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&[u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Mat)> {
        let name = self.string()?;
        let rank = self.u32()?;
        if rank != 2 {
            return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
        }
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.saturating_mul(8) <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is truncated")))?;
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Mat::from_vec(rows, cols, data)))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Mat)>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.tensor()).collect()
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config: ModelConfig = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
    let config_digest = r.string()?;
    let step = r.u64()?;
    let adam_step = r.u64()?;
    let cursors = (r.u64()?, r.u64()?);
    let params = ModelParams::from_named(&config, r.tensors()?)?;
    let mut moments = Vec::new();
    for _ in 0..2 {
        let named = r.tensors()?;
        if named.len() != params.len() {
            return Err(Error::Checkpoint("moment count differs from parameters".into()));
        }
        let mut out = Vec::with_capacity(named.len());
        for ((n, m), (pn, p)) in named.into_iter().zip(params.named()) {
            if n != pn || m.shape() != p.shape() {
                return Err(Error::Checkpoint(format!("moment {n} does not match parameter {pn}")));
            }
            out.push(m);
        }
        moments.push(out);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let v = moments.pop().unwrap();
    let m = moments.pop().unwrap();
    Ok(Checkpoint {
        state: TrainState {
            step,
            params,
            adam: AdamState { step: adam_step, m, v },
            cursors,
        },
        config_digest,
    })
}

/// Writes through a temporary file so a crash never leaves a partial checkpoint.
pub fn save_checkpoint(path: &Path, state: &TrainState, config_digest: &str) -> Result<()> {
    let bytes = encode(state, config_digest)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
