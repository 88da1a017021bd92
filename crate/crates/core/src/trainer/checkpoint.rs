//! Checkpoint container.
//!
//! ```text
//! b"POSRCKPT" | u32 version | u64 header length | JSON header | f64 data
//! ```
//!
//! All integers and floats are little-endian. The header lists every array
//! with its name, role, shape and byte offset into the data section, plus
//! the iteration counter, RNG position, the training config and its hash.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{ParamStore, Shape, Tensor};
use crate::error::{Error, Result};

use super::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"POSRCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64le";

/// Position of the data-sampling generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, kept as text because it is 128 bits wide.
    #[serde(with = "u128_text")]
    pub word_pos: u128,
}

mod u128_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    /// Completed iterations.
    pub iteration: u64,
    pub params: ParamStore,
    /// Optimizer state per parameter group.
    pub optimizers: BTreeMap<String, AdamState>,
    pub rng: RngState,
    pub config_toml: String,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    role: Role,
    /// Optimizer group for moment arrays.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<String>,
    shape: [usize; 4],
    offset: u64,
    #[serde(default)]
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    stage: u8,
    iteration: u64,
    rng: RngState,
    config_hash: String,
    config_toml: String,
    optimizer_steps: BTreeMap<String, u64>,
    tensors: Vec<Entry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut arrays: Vec<&Tensor> = Vec::new();
        let mut offset = 0u64;
        let mut add = |entries: &mut Vec<Entry>, name: &str, role, group: Option<&str>, frozen, t: &'_ Tensor| {
            entries.push(Entry {
                name: name.to_owned(),
                role,
                group: group.map(str::to_owned),
                shape: t.shape().dims(),
                offset,
                frozen,
            });
            offset += 8 * t.len() as u64;
        };
        for (name, p) in self.params.iter() {
            add(&mut entries, name, Role::Param, None, p.frozen, &p.tensor);
            arrays.push(&p.tensor);
        }
        for (group, state) in &self.optimizers {
            for (name, t) in &state.m {
                add(&mut entries, name, Role::AdamM, Some(group), false, t);
                arrays.push(t);
            }
            for (name, t) in &state.v {
                add(&mut entries, name, Role::AdamV, Some(group), false, t);
                arrays.push(t);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            dtype: DTYPE.to_owned(),
            stage: self.stage,
            iteration: self.iteration,
            rng: self.rng,
            config_hash: self.config_hash.clone(),
            config_toml: self.config_toml.clone(),
            optimizer_steps: self.optimizers.iter().map(|(k, s)| (k.clone(), s.step)).collect(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header runs past end of file"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..data_start]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != version || header.dtype != DTYPE {
            return Err(bad(format!("unsupported dtype `{}`", header.dtype)));
        }
        let data = &bytes[data_start..];
        let mut ckpt = Checkpoint {
            stage: header.stage,
            iteration: header.iteration,
            rng: header.rng,
            config_toml: header.config_toml,
            config_hash: header.config_hash,
            ..Default::default()
        };
        for (group, step) in header.optimizer_steps {
            ckpt.optimizers.insert(
                group,
                AdamState {
                    step,
                    ..Default::default()
                },
            );
        }
        for e in header.tensors {
            let shape = Shape::from_dims(&e.shape)?;
            let start = e.offset as usize;
            let end = start
                .checked_add(8 * shape.numel())
                .filter(|&end| end <= data.len())
                .ok_or_else(|| bad(format!("array `{}` runs past end of file", e.name)))?;
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, values)?;
            match e.role {
                Role::Param if e.frozen => ckpt.params.insert_frozen(e.name, t),
                Role::Param => ckpt.params.insert(e.name, t),
                Role::AdamM | Role::AdamV => {
                    let group = e
                        .group
                        .ok_or_else(|| bad(format!("moment array `{}` has no group", e.name)))?;
                    let state = ckpt
                        .optimizers
                        .get_mut(&group)
                        .ok_or_else(|| bad(format!("unknown optimizer group `{group}`")))?;
                    let map = if matches!(e.role, Role::AdamM) {
                        &mut state.m
                    } else {
                        &mut state.v
                    };
                    map.insert(e.name, t);
                }
            }
        }
        Ok(ckpt)
    }

    /// Writes atomically through a temporary sibling file.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parameters whose names start with `prefix.`.
    pub fn params_with_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        let p = format!("{prefix}.");
        for (name, param) in self.params.iter().filter(|(n, _)| n.starts_with(&p)) {
            if param.frozen {
                out.insert_frozen(name, param.tensor.clone());
            } else {
                out.insert(name, param.tensor.clone());
            }
        }
        out
    }
}
