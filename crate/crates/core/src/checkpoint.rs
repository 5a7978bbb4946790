//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "RSWINCKP" | u32 version | u32 len + TOML metadata
//! u32 tensor count | per tensor: u32 len + name, u8 dtype, u32 rank, u64 dims.., raw data
//! 32-byte SHA-256 of everything before it
//! ```
//!
//! The metadata block carries the model config, input normalization, class
//! names, training counters and optimizer hyperparameters. Adam moments are
//! stored as extra tensors named `adam.m/<param>` and `adam.v/<param>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::data::Normalization;
use crate::error::{CheckpointError, Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{numel, Scalar, Tensor};
use crate::training::{AdamState, TrainState};

pub const MAGIC: &[u8; 8] = b"RSWINCKP";
pub const FORMAT_VERSION: u32 = 1;
const HASH_LEN: usize = 32;
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerMeta {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

/// Everything in a checkpoint except tensor data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub dtype: String,
    pub class_names: Vec<String>,
    pub model: ModelConfig,
    pub normalization: Normalization,
    pub state: TrainState,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub class_names: Vec<String>,
    pub normalization: Normalization,
    pub state: TrainState,
    pub optimizer: Option<AdamState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: Model<T>, class_names: Vec<String>, normalization: Normalization) -> Self {
        Self { model, class_names, normalization, state: TrainState::default(), optimizer: None }
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            dtype: T::DTYPE.to_string(),
            class_names: self.class_names.clone(),
            model: self.model.config().clone(),
            normalization: self.normalization.clone(),
            state: self.state.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta { t: o.t, beta1: o.beta1, beta2: o.beta2, eps: o.eps }),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = toml::to_string(&self.meta()).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let mut records: Vec<(String, &Tensor<T>)> =
            self.model.params().iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [(MOMENT_M, &opt.m), (MOMENT_V, &opt.v)] {
                if moments.len() != self.model.params().len() {
                    return Err(CheckpointError::Malformed("optimizer moments do not match parameters".into()).into());
                }
                for ((name, _), t) in self.model.params().iter().zip(moments) {
                    records.push((format!("{prefix}{name}"), t));
                }
            }
        }

        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_bytes(&mut buf, meta.as_bytes());
        buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            put_bytes(&mut buf, name.as_bytes());
            buf.push(dtype_code(T::DTYPE));
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut buf);
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parsed = parse(bytes);
        let (meta, records) = match parsed {
            Ok(p) => p,
            Err(e @ (CheckpointError::BadMagic | CheckpointError::Version { .. } | CheckpointError::Truncated(_))) => {
                return Err(e.into());
            }
            Err(e) => {
                // A damaged body usually fails to parse; report it as damage.
                return Err(if digest_ok(bytes) { e } else { CheckpointError::Integrity }.into());
            }
        };
        if meta.dtype != T::DTYPE {
            return Err(CheckpointError::Dtype { found: meta.dtype, expected: T::DTYPE.to_string() }.into());
        }
        let mut params = ParamStore::new();
        let mut moments_m = Vec::new();
        let mut moments_v = Vec::new();
        for (name, shape, data) in records {
            let tensor = Tensor::new(&shape, data.chunks_exact(T::BYTES).map(T::read_le).collect())
                .map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
            if let Some(p) = name.strip_prefix(MOMENT_M) {
                moments_m.push((p.to_string(), tensor));
            } else if let Some(p) = name.strip_prefix(MOMENT_V) {
                moments_v.push((p.to_string(), tensor));
            } else {
                params.insert(name, tensor).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            }
        }
        let model = Model::from_params(meta.model.clone(), params)?;
        let optimizer = match meta.optimizer {
            None if moments_m.is_empty() && moments_v.is_empty() => None,
            None => return Err(CheckpointError::Malformed("moment tensors without optimizer metadata".into()).into()),
            Some(o) => {
                let check = |moments: Vec<(String, Tensor<T>)>| -> Result<Vec<Tensor<T>>> {
                    if moments.len() != model.params().len() {
                        return Err(CheckpointError::Malformed("optimizer moments do not cover every parameter".into()).into());
                    }
                    moments
                        .into_iter()
                        .zip(model.params().iter())
                        .map(|((name, t), (pname, p))| {
                            if name != pname {
                                Err(CheckpointError::Malformed(format!("moment for {name} where {pname} expected")).into())
                            } else if t.shape() != p.shape() {
                                Err(CheckpointError::ShapeDisagreement {
                                    name: format!("adam/{name}"),
                                    found: t.shape().to_vec(),
                                    expected: p.shape().to_vec(),
                                }
                                .into())
                            } else {
                                Ok(t)
                            }
                        })
                        .collect()
                };
                Some(AdamState { t: o.t, beta1: o.beta1, beta2: o.beta2, eps: o.eps, m: check(moments_m)?, v: check(moments_v)? })
            }
        };
        Ok(Self { model, class_names: meta.class_names, normalization: meta.normalization, state: meta.state, optimizer })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and insists that it was written for `expected`.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.config() != expected {
            return Err(CheckpointError::Incompatible(config_difference(ckpt.config(), expected)).into());
        }
        Ok(ckpt)
    }
}

/// Reads only the header and metadata, e.g. to pick the element type.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    header(&mut r)?;
    Ok(meta_block(&mut r)?)
}

fn config_difference(found: &ModelConfig, expected: &ModelConfig) -> String {
    let as_table = |c: &ModelConfig| toml::Table::try_from(c).unwrap_or_default();
    let (f, e) = (as_table(found), as_table(expected));
    let diffs: Vec<String> = e
        .iter()
        .filter(|(k, v)| f.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: checkpoint has {}, expected {v}", f.get(k).map_or("nothing".into(), ToString::to_string)))
        .collect();
    format!("checkpoint model config differs ({})", diffs.join("; "))
}

fn dtype_code(dtype: &str) -> u8 {
    match dtype {
        "f32" => 1,
        "f64" => 2,
        _ => 0,
    }
}

fn dtype_width(code: u8) -> Option<(usize, &'static str)> {
    match code {
        1 => Some((4, "f32")),
        2 => Some((8, "f64")),
        _ => None,
    }
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn digest_ok(bytes: &[u8]) -> bool {
    bytes.len() >= HASH_LEN && {
        let (body, tail) = bytes.split_at(bytes.len() - HASH_LEN);
        Sha256::digest(body).as_slice() == tail
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
}

fn header(r: &mut Reader<'_>) -> Result<(), CheckpointError> {
    let have = r.bytes.len().min(MAGIC.len());
    if r.bytes[..have] != MAGIC[..have] {
        return Err(CheckpointError::BadMagic);
    }
    r.take(MAGIC.len(), "magic bytes")?;
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
    }
    Ok(())
}

fn meta_block(r: &mut Reader<'_>) -> Result<CheckpointMeta, CheckpointError> {
    let text = r.string("metadata block")?;
    toml::from_str(&text).map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))
}

type Record<'a> = (String, Vec<usize>, &'a [u8]);

fn parse(bytes: &[u8]) -> Result<(CheckpointMeta, Vec<Record<'_>>), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    header(&mut r)?;
    let meta = meta_block(&mut r)?;
    let count = r.u32("tensor count")?;
    let mut records = Vec::new();
    for _ in 0..count {
        let name = r.string("tensor record")?;
        let code = r.take(1, "tensor record")?[0];
        let (width, dtype) = dtype_width(code).ok_or_else(|| CheckpointError::Malformed(format!("tensor {name}: dtype code {code}")))?;
        if dtype != meta.dtype {
            return Err(CheckpointError::Malformed(format!("tensor {name} is {dtype} in a {} checkpoint", meta.dtype)));
        }
        let rank = r.u32("tensor record")? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u64("tensor record").map(|d| d as usize)).collect::<Result<_, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).and_then(|n| n.checked_mul(width));
        let n = n.ok_or_else(|| CheckpointError::Malformed(format!("tensor {name}: absurd shape {shape:?}")))?;
        let data = r.take(n, "tensor data")?;
        debug_assert_eq!(numel(&shape) * width, data.len());
        records.push((name, shape, data));
    }
    let body_end = r.pos;
    r.take(HASH_LEN, "integrity trailer")?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!("{} bytes after the trailer", bytes.len() - r.pos)));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(CheckpointError::Integrity);
    }
    Ok((meta, records))
}
