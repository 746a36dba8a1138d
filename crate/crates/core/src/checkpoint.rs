//! Single-file checkpoint container.
//!
//! Layout: `L4CK`, format version (u32 LE), manifest length (u64 LE), the
//! manifest as JSON, then the LFT1 payloads back to back. Offsets in the
//! manifest are relative to the start of the payload section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::pipeline::{Model, SceneCodec};
use crate::sbd::Branch;
use crate::supervision::EmbeddingKind;
use crate::tensor::{lft, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"L4CK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub offset: u64,
    pub length: u64,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    seed: u64,
    config: RunConfig,
    entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub config: RunConfig,
    pub tensors: Vec<(String, Tensor)>,
}

fn corrupt(entry: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        entry: entry.to_string(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = lft::encode(&t.into());
            entries.push(Entry {
                name: name.clone(),
                offset: payload.len() as u64,
                length: bytes.len() as u64,
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
            });
            payload.extend_from_slice(&bytes);
        }
        let manifest = serde_json::to_vec(&Manifest {
            version: VERSION,
            seed: self.seed,
            config: self.config.clone(),
            entries,
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("header", "not a checkpoint (bad magic or truncated header)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(
                "header",
                format!("format version {version} is not supported (expected {VERSION})"),
            ));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if mlen > body.len() {
            return Err(corrupt("manifest", format!("length {mlen} exceeds file size")));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..mlen]).map_err(|e| corrupt("manifest", e.to_string()))?;
        if manifest.version != version {
            return Err(corrupt("manifest", "version disagrees with the header"));
        }
        let payload = &body[mlen..];
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            if tensors.iter().any(|(n, _): &(String, Tensor)| n == &e.name) {
                return Err(corrupt(&e.name, "listed twice"));
            }
            if e.dtype != "f32" {
                return Err(corrupt(&e.name, format!("unsupported dtype {}", e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(corrupt(&e.name, format!("offset {} should be {expected_offset}", e.offset)));
            }
            let start = e.offset as usize;
            let end = start
                .checked_add(e.length as usize)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| corrupt(&e.name, "payload is truncated"))?;
            let slice = &payload[start..end];
            let actual = lft::encoded_len(slice).map_err(|err| corrupt(&e.name, err.to_string()))?;
            if actual != slice.len() {
                return Err(corrupt(
                    &e.name,
                    format!("recorded length {} but the array occupies {actual} bytes", e.length),
                ));
            }
            let t = lft::decode(slice)
                .and_then(lft::LftArray::into_tensor)
                .map_err(|err| corrupt(&e.name, err.to_string()))?;
            if t.shape() != e.shape.as_slice() {
                return Err(corrupt(&e.name, format!("shape {:?} disagrees with manifest {:?}", t.shape(), e.shape)));
            }
            expected_offset += e.length;
            tensors.push((e.name.clone(), t));
        }
        if expected_offset as usize != payload.len() {
            return Err(corrupt("payload", "trailing bytes after the last entry"));
        }
        Ok(Checkpoint {
            seed: manifest.seed,
            config: manifest.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Snapshot of every parameter of `model`, in store order.
    pub fn from_model(model: &Model, config: &RunConfig, seed: u64) -> Checkpoint {
        Self::from_stores(&model.stores(), config, seed)
    }

    /// Snapshot of the given stores, in order.
    pub fn from_stores(stores: &[&ParamStore], config: &RunConfig, seed: u64) -> Checkpoint {
        let tensors = stores
            .iter()
            .flat_map(|s| s.iter().map(|(n, t)| (n.to_string(), Tensor::new(t.shape(), t.data().to_vec()).unwrap())))
            .collect();
        Checkpoint {
            seed,
            config: config.clone(),
            tensors,
        }
    }

    /// Rebuilds the model stored in this checkpoint. When `expected` is
    /// given, architectural differences are errors and any other difference
    /// is returned as a warning (and logged).
    pub fn to_model(&self, expected: Option<&RunConfig>) -> Result<(Model, Vec<String>)> {
        let mut warnings = Vec::new();
        if let Some(exp) = expected {
            if !exp.same_architecture(&self.config) {
                return Err(corrupt("config", "checkpoint architecture does not match the requested configuration"));
            }
            if exp.train != self.config.train {
                warnings.push(format!(
                    "checkpoint was trained with {} encoder; loading into a {} configuration",
                    frozen_word(self.config.train.freeze_encoder),
                    frozen_word(exp.train.freeze_encoder)
                ));
            }
            if exp.loss != self.config.loss || exp.autoencoder != self.config.autoencoder || exp.eval != self.config.eval {
                warnings.push("checkpoint loss/autoencoder/eval settings differ from the configuration".into());
            }
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        let mut model = Model::new(self.config.encoder.clone(), self.config.sbd.clone(), 0)?;
        model.codecs = self.codec_skeletons()?;
        let mut used = vec![false; self.tensors.len()];
        let index: std::collections::HashMap<&str, usize> =
            self.tensors.iter().enumerate().map(|(i, (n, _))| (n.as_str(), i)).collect();
        let mut fill = |store: &mut ParamStore| -> Result<()> {
            let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
            for n in names {
                let &i = index.get(n.as_str()).ok_or_else(|| corrupt(&n, "missing from checkpoint"))?;
                store.set(&n, &self.tensors[i].1).map_err(|e| corrupt(&n, e.to_string()))?;
                used[i] = true;
            }
            Ok(())
        };
        fill(&mut model.encoder.params)?;
        fill(&mut model.sbd.params)?;
        for c in &mut model.codecs {
            for (_, ae) in &mut c.aes {
                fill(&mut ae.params)?;
            }
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(corrupt(&self.tensors[i].0, "not a parameter of the configured model"));
        }
        Ok((model, warnings))
    }

    /// Empty codecs for every `ae/<scene>/<kind>/` prefix in the checkpoint.
    fn codec_skeletons(&self) -> Result<Vec<SceneCodec>> {
        let mut scenes: Vec<(String, Vec<(Branch, usize)>)> = Vec::new();
        for (name, t) in &self.tensors {
            let parts: Vec<&str> = name.split('/').collect();
            if parts.first() != Some(&"ae") || !name.ends_with("/enc/l0/w") || parts.len() != 6 {
                continue;
            }
            let kind = [EmbeddingKind::ClipStatic, EmbeddingKind::Dynamic]
                .into_iter()
                .find(|k| k.name() == parts[2])
                .ok_or_else(|| corrupt(name, "unknown embedding kind"))?;
            let entry = match scenes.iter_mut().position(|(s, _)| s == parts[1]) {
                Some(i) => &mut scenes[i],
                None => {
                    scenes.push((parts[1].to_string(), Vec::new()));
                    scenes.last_mut().unwrap()
                }
            };
            entry.1.push((kind.branch(), t.shape()[0]));
        }
        scenes
            .iter()
            .map(|(s, dims)| SceneCodec::skeleton(s, dims, &self.config.autoencoder))
            .collect()
    }
}

fn frozen_word(frozen: bool) -> &'static str {
    if frozen {
        "a frozen"
    } else {
        "a trainable"
    }
}
