//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! SEQGRAD-CHECKPOINT\n
//! {single-line JSON header}\n
//! payload: little-endian f64 values, tensors in manifest order
//! ```
//!
//! The header carries the format version, layout, training config, RNG
//! position, step counter, optional vocabulary and a manifest of
//! `(name, len)` entries. Parameters come first (in [`ParamSet::tensors`]
//! order), then optimizer buffers prefixed `first_moment/` and
//! `second_moment/`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Vocab;
use crate::cells::Arch;
use crate::error::{Error, Result};
use crate::linalg::{Real, RngState};
use crate::sequence::{ModelLayout, ParamSet};
use crate::training::{OptimizerKind, OptimizerState, TrainConfig};

pub const MAGIC: &str = "SEQGRAD-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub rng: RngState,
    pub step: u64,
    pub vocab: Option<Vocab>,
    /// Free-form run description; the command-line front end stores its
    /// run config here.
    pub run: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    arch: Arch,
    layout: ModelLayout,
    config: TrainConfig,
    rng: RngState,
    step: u64,
    optimizer: OptimizerKind,
    optimizer_step: u64,
    vocab: Option<String>,
    run: Option<serde_json::Value>,
    tensors: Vec<ManifestEntry>,
    payload_bytes: u64,
}

fn manifest(ck: &Checkpoint) -> (Vec<ManifestEntry>, Vec<Real>) {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut push = |prefix: &str, set: &ParamSet| {
        for t in set.tensors() {
            entries.push(ManifestEntry {
                name: format!("{prefix}{}", t.name),
                len: t.data.len(),
            });
            payload.extend_from_slice(t.data);
        }
    };
    push("", &ck.params);
    for (name, buf) in ck.optimizer.buffers() {
        push(&format!("{name}/"), buf);
    }
    (entries, payload)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let (tensors, payload) = manifest(ck);
    let header = Header {
        version: FORMAT_VERSION,
        arch: ck.params.arch(),
        layout: ck.params.layout.clone(),
        config: ck.config.clone(),
        rng: ck.rng,
        step: ck.step,
        optimizer: ck.optimizer.kind,
        optimizer_step: ck.optimizer.step,
        vocab: ck.vocab.as_ref().map(|v| v.symbols().iter().collect()),
        run: ck.run.clone(),
        tensors,
        payload_bytes: (payload.len() * 8) as u64,
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut bytes = Vec::with_capacity(MAGIC.len() + json.len() + 2 + payload.len() * 8);
    bytes.extend_from_slice(MAGIC.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(json.as_bytes());
    bytes.push(b'\n');
    for v in payload {
        bytes.extend_from_slice(&(v as f64).to_le_bytes());
    }

    // write beside the target, then rename, so readers never see half a file
    let tmp = path.with_extension("partial");
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let pos = bytes.iter().position(|b| *b == b'\n')?;
    Some((&bytes[..pos], &bytes[pos + 1..]))
}

fn fill(
    set: &mut ParamSet,
    prefix: &str,
    entries: &mut std::slice::Iter<'_, ManifestEntry>,
    values: &mut std::slice::Iter<'_, Real>,
) -> Result<()> {
    for t in set.tensors_mut() {
        let want = format!("{prefix}{}", t.name);
        let entry = entries
            .next()
            .ok_or_else(|| Error::Format(format!("manifest ends before tensor {want}")))?;
        if entry.name != want || entry.len != t.data.len() {
            return Err(Error::Format(format!(
                "manifest entry {} [{}] does not match expected {want} [{}]",
                entry.name,
                entry.len,
                t.data.len()
            )));
        }
        for slot in t.data.iter_mut() {
            *slot = *values.next().expect("payload length checked against manifest");
        }
    }
    Ok(())
}

/// Reads a checkpoint. Any inconsistency is an error and nothing is
/// returned.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, rest) = split_line(&bytes).ok_or_else(|| Error::Format("missing magic line".into()))?;
    if magic != MAGIC.as_bytes() {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let (json, payload) = split_line(rest).ok_or_else(|| Error::Format("missing header".into()))?;
    let value: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version:?}, expected {FORMAT_VERSION}"
        )));
    }
    let header: Header = serde_json::from_value(value).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.arch != header.layout.arch {
        return Err(Error::Format("architecture tag disagrees with layout".into()));
    }
    header
        .config
        .validate()
        .map_err(|e| Error::Format(format!("bad config: {e}")))?;

    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if header.payload_bytes != (total * 8) as u64 {
        return Err(Error::Format(format!(
            "header declares {} payload bytes but the manifest needs {}",
            header.payload_bytes,
            total * 8
        )));
    }
    if payload.len() as u64 != header.payload_bytes {
        return Err(Error::Format(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let values: Vec<Real> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")) as Real)
        .collect();

    let mut params = ParamSet::zeros(&header.layout).map_err(|e| Error::Format(format!("bad layout: {e}")))?;
    let mut optimizer = OptimizerState::new(header.optimizer, &params);
    optimizer.step = header.optimizer_step;
    let mut entries = header.tensors.iter();
    let mut vals = values.iter();
    fill(&mut params, "", &mut entries, &mut vals)?;
    for (name, buf) in optimizer.buffers_mut() {
        fill(buf, &format!("{name}/"), &mut entries, &mut vals)?;
    }
    if let Some(extra) = entries.next() {
        return Err(Error::Format(format!("unexpected tensor {} in manifest", extra.name)));
    }
    let vocab = header
        .vocab
        .map(|s| Vocab::from_symbols(s.chars().collect()))
        .transpose()
        .map_err(|e| Error::Format(format!("bad vocabulary: {e}")))?;

    Ok(Checkpoint {
        params,
        optimizer,
        config: header.config,
        rng: header.rng,
        step: header.step,
        vocab,
        run: header.run,
    })
}
