//! Versioned binary checkpoint container.
//!
//! Layout: `b"DPLCKPT\0"`, format version (u32 LE), manifest length
//! (u64 LE), JSON manifest, payload. The payload is a flat run of f64 LE
//! values; the manifest lists every tensor per sub-module with its offset
//! into the payload, so the container does not depend on the in-memory
//! scalar type.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::indicators::QuantizerSpec;
use crate::nn::{Adam, AdamConfig, Group, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"DPLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset in values (not bytes) into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleEntry {
    pub name: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdamEntry {
    pub param: String,
    pub first: usize,
    pub second: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamManifest {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<AdamEntry>,
}

/// Where a training run stood when the checkpoint was written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    /// 1-based global epoch just completed.
    pub epoch: usize,
    pub stage: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_fingerprint: String,
    pub model: ModelConfig,
    pub progress: Option<Progress>,
    pub modules: Vec<ModuleEntry>,
    /// Quantizer documents keyed by indicator name.
    pub quantizers: BTreeMap<String, String>,
    pub adam: Option<AdamManifest>,
    pub payload_len: usize,
    pub payload_sha256: String,
}

/// A decoded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub payload: Vec<f64>,
}

/// Inputs for [`write_checkpoint`].
pub struct CheckpointContents<'a, T> {
    pub model: &'a ModelConfig,
    pub store: &'a ParamStore<T>,
    pub config_fingerprint: &'a str,
    pub progress: Option<Progress>,
    pub quantizers: &'a [(&'a str, &'a QuantizerSpec)],
    pub adam: Option<&'a Adam<T>>,
}

fn push_matrix<T: Scalar>(payload: &mut Vec<f64>, m: &Matrix<T>) -> usize {
    let offset = payload.len();
    payload.extend(m.data().iter().map(|x| x.to_f64_lossy()));
    offset
}

fn payload_digest(payload: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in payload {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn encode<T: Scalar>(contents: &CheckpointContents<'_, T>) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut modules = Vec::new();
    for group in Group::ALL {
        let tensors: Vec<TensorEntry> = contents
            .store
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                offset: push_matrix(&mut payload, &p.value),
            })
            .collect();
        if !tensors.is_empty() {
            modules.push(ModuleEntry {
                name: group.name().to_string(),
                tensors,
            });
        }
    }
    let adam = contents.adam.map(|adam| {
        let moments = contents
            .store
            .iter()
            .filter_map(|(id, p)| {
                let i = id.index();
                match (adam.first.get(i)?, adam.second.get(i)?) {
                    (Some(m), Some(v)) => Some(AdamEntry {
                        param: p.name.clone(),
                        first: push_matrix(&mut payload, m),
                        second: push_matrix(&mut payload, v),
                    }),
                    _ => None,
                }
            })
            .collect();
        AdamManifest {
            config: adam.config,
            step: adam.step,
            moments,
        }
    });
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config_fingerprint: contents.config_fingerprint.to_string(),
        model: contents.model.clone(),
        progress: contents.progress,
        modules,
        quantizers: contents
            .quantizers
            .iter()
            .map(|(k, q)| (k.to_string(), q.to_text()))
            .collect(),
        adam,
        payload_len: payload.len(),
        payload_sha256: payload_digest(&payload),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + json.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for x in &payload {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Writes atomically (temporary file then rename).
pub fn write_checkpoint<T: Scalar>(path: &Path, contents: &CheckpointContents<'_, T>) -> Result<()> {
    let bytes = encode(contents);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..len]).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let raw = &body[len..];
    if raw.len() != manifest.payload_len * 8 {
        return Err(bad("payload length does not match manifest"));
    }
    let payload: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if payload_digest(&payload) != manifest.payload_sha256 {
        return Err(bad("payload checksum mismatch"));
    }
    Ok(Checkpoint { manifest, payload })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

impl Checkpoint {
    fn slice(&self, offset: usize, n: usize) -> Result<&[f64]> {
        self.payload
            .get(offset..offset + n)
            .ok_or_else(|| Error::Checkpoint("tensor extends past payload".into()))
    }

    fn tensors(&self) -> impl Iterator<Item = (&str, &TensorEntry)> {
        self.manifest
            .modules
            .iter()
            .flat_map(|m| m.tensors.iter().map(move |t| (m.name.as_str(), t)))
    }

    /// Copies stored values into every parameter of `groups`. Every such
    /// parameter must be present with a matching shape.
    pub fn restore_groups<T: Scalar>(&self, store: &mut ParamStore<T>, groups: &[Group]) -> Result<()> {
        let index: BTreeMap<&str, (&str, &TensorEntry)> =
            self.tensors().map(|(m, t)| (t.name.as_str(), (m, t))).collect();
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let param = store.get(id);
            let (module, entry) = *index
                .get(param.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{}` missing", param.name)))?;
            if module != param.group.name() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` stored under module `{module}`, expected `{}`",
                    param.name,
                    param.group.name()
                )));
            }
            if (entry.rows, entry.cols) != (param.value.rows(), param.value.cols()) {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {}x{}, model expects {}x{}",
                    param.name,
                    entry.rows,
                    entry.cols,
                    param.value.rows(),
                    param.value.cols()
                )));
            }
            let values = self.slice(entry.offset, entry.rows * entry.cols)?;
            let dst = store.value_mut(id);
            for (d, &v) in dst.data_mut().iter_mut().zip(values) {
                *d = T::lit(v);
            }
        }
        Ok(())
    }

    pub fn restore_all<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.restore_groups(store, &Group::ALL)
    }

    /// Rebuilds optimizer state against the parameter order of `store`.
    pub fn adam<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Option<Adam<T>>> {
        let Some(am) = &self.manifest.adam else {
            return Ok(None);
        };
        let mut adam = Adam::new(am.config, store.len());
        adam.step = am.step;
        for e in &am.moments {
            let id = store
                .find(&e.param)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown `{}`", e.param)))?;
            let shape = store.value(id);
            let (r, c) = (shape.rows(), shape.cols());
            let load = |off| -> Result<Matrix<T>> {
                Matrix::from_vec(r, c, self.slice(off, r * c)?.iter().map(|&x| T::lit(x)).collect())
            };
            adam.first[id.index()] = Some(load(e.first)?);
            adam.second[id.index()] = Some(load(e.second)?);
        }
        Ok(Some(adam))
    }

    pub fn quantizer(&self, name: &str) -> Result<Option<QuantizerSpec>> {
        self.manifest
            .quantizers
            .get(name)
            .map(|text| QuantizerSpec::from_text(text, Path::new(name)))
            .transpose()
    }
}

/// Loads one group's weights from a checkpoint file (pretrained backbone).
pub fn load_group_weights<T: Scalar>(path: &Path, store: &mut ParamStore<T>, group: Group) -> Result<()> {
    let wrap = |reason: String| Error::WeightLoad {
        path: path.to_path_buf(),
        reason,
    };
    let ckpt = read_checkpoint(path).map_err(|e| wrap(e.to_string()))?;
    ckpt.restore_groups(store, &[group]).map_err(|e| wrap(e.to_string()))
}

/// `epoch-003.ckpt` style names keep lexical and numeric order aligned.
pub fn epoch_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:03}.ckpt"))
}

/// Highest-numbered epoch checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(n) = name
            .strip_prefix("epoch-")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    Ok(best)
}
