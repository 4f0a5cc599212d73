//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ODIT" | u32 version | u64 header_len | header JSON (sorted keys)
//! u32 tensor_count | tensors sorted by name:
//!     u32 name_len | name | u8 dtype (1 = f64) | u32 ndim | u64 dims[ndim] | f64 data
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::Adam;
use crate::lora::{AdapterKey, AdapterSet, Binding, LoraAdapter};
use crate::model::{Dit, ModelConfig, PatchCodec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ODIT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Base weights, codec, adapters and (optionally) optimizer state.
    Full,
    /// Adapters only, tied to a base by fingerprint.
    Adapters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterMeta {
    pub block: usize,
    pub binding: Binding,
    pub rank: usize,
    pub alpha: f64,
    pub enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub adapters: Vec<AdapterMeta>,
    /// SHA-256 of the base weights and codec, hex encoded.
    pub base_fingerprint: String,
    #[serde(default)]
    pub optimizer: Option<OptimizerMeta>,
    /// Free-form run information.
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: BTreeMap<String, Tensor>,
}

fn hash_tensor(h: &mut Sha256, name: &str, t: &Tensor) {
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update((t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
}

/// Content hash of the frozen part of a model.
pub fn base_fingerprint(model: &Dit) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.params() {
        hash_tensor(&mut h, name, t);
    }
    hash_tensor(&mut h, "codec.encode", model.codec().encode_matrix());
    hash_tensor(&mut h, "codec.decode", model.codec().decode_matrix());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn adapter_entries(model: &Dit, tensors: &mut BTreeMap<String, Tensor>) -> Vec<AdapterMeta> {
    model
        .adapters()
        .iter()
        .map(|(k, a)| {
            tensors.insert(k.param_name("down"), (*a.down).clone());
            tensors.insert(k.param_name("up"), (*a.up).clone());
            AdapterMeta {
                block: k.block,
                binding: k.binding,
                rank: a.rank,
                alpha: a.alpha,
                enabled: a.enabled,
            }
        })
        .collect()
}

impl Checkpoint {
    pub fn from_model(model: &Dit, optimizer: Option<&Adam>) -> Self {
        let mut tensors: BTreeMap<String, Tensor> = model
            .params()
            .iter()
            .map(|(n, t)| (format!("base.{n}"), (**t).clone()))
            .collect();
        tensors.insert("codec.encode".into(), model.codec().encode_matrix().clone());
        tensors.insert("codec.decode".into(), model.codec().decode_matrix().clone());
        let adapters = adapter_entries(model, &mut tensors);
        let optimizer = optimizer.map(|o| {
            for (name, m) in &o.m {
                tensors.insert(format!("adam.m.{name}"), Tensor::new(vec![m.len()], m.clone()).expect("1-d"));
            }
            for (name, v) in &o.v {
                tensors.insert(format!("adam.v.{name}"), Tensor::new(vec![v.len()], v.clone()).expect("1-d"));
            }
            OptimizerMeta {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                step: o.step,
            }
        });
        Self {
            header: Header {
                kind: CheckpointKind::Full,
                model: model.config().clone(),
                adapters,
                base_fingerprint: base_fingerprint(model),
                optimizer,
                metadata: serde_json::Value::Null,
            },
            tensors,
        }
    }

    /// Adapter factors plus the fingerprint of the base they were trained on.
    pub fn adapters_only(model: &Dit) -> Self {
        let mut tensors = BTreeMap::new();
        let adapters = adapter_entries(model, &mut tensors);
        Self {
            header: Header {
                kind: CheckpointKind::Adapters,
                model: model.config().clone(),
                adapters,
                base_fingerprint: base_fingerprint(model),
                optimizer: None,
                metadata: serde_json::Value::Null,
            },
            tensors,
        }
    }

    pub fn with_metadata(mut self, metadata: serde_json::Value) -> Self {
        self.header.metadata = metadata;
        self
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    fn adapter_set(&self) -> Result<AdapterSet> {
        let mut set = AdapterSet::new();
        for m in &self.header.adapters {
            let key = AdapterKey::new(m.block, m.binding);
            let down = self.tensor(&key.param_name("down"))?.clone();
            let up = self.tensor(&key.param_name("up"))?.clone();
            let mut a = LoraAdapter::from_factors(down, up, m.alpha)?;
            if a.rank != m.rank {
                return Err(Error::Format(format!("adapter {} {} rank mismatch", m.block, m.binding)));
            }
            a.enabled = m.enabled;
            set.insert(key, a);
        }
        Ok(set)
    }

    /// Rebuilds the model from a full checkpoint.
    pub fn model(&self) -> Result<Dit> {
        if self.header.kind != CheckpointKind::Full {
            return Err(Error::Format("adapter-only checkpoint has no base model".into()));
        }
        let cfg = self.header.model.clone();
        let params = self
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix("base.").map(|n| (n.to_string(), t.clone())))
            .collect();
        let codec = PatchCodec::from_projections(
            cfg.patch_size,
            cfg.channels,
            self.tensor("codec.encode")?.clone(),
            self.tensor("codec.decode")?.clone(),
        )?;
        let model = Dit::from_parts(cfg, codec, params, self.adapter_set()?)?;
        if base_fingerprint(&model) != self.header.base_fingerprint {
            return Err(Error::Format("base fingerprint does not match the stored weights".into()));
        }
        Ok(model)
    }

    /// Attaches this checkpoint's adapters to `base`, which must carry the
    /// same frozen weights the adapters were trained on.
    pub fn attach(&self, base: &Dit) -> Result<Dit> {
        if base_fingerprint(base) != self.header.base_fingerprint {
            return Err(Error::Format("adapters were trained on a different base model".into()));
        }
        let mut m = base.derive(self.header.model.clone(), 0)?;
        let set = self.adapter_set()?;
        let installed: Vec<AdapterKey> = m.adapters().keys().copied().collect();
        for k in installed {
            if !set.contains_key(&k) {
                return Err(Error::Format(format!("adapter {} {} missing", k.block, k.binding)));
            }
        }
        for (k, a) in set {
            m.set_adapter(k, a)?;
        }
        Ok(m)
    }

    pub fn optimizer(&self) -> Result<Option<Adam>> {
        let Some(meta) = &self.header.optimizer else { return Ok(None) };
        let mut adam = Adam::new(meta.lr, meta.weight_decay);
        adam.beta1 = meta.beta1;
        adam.beta2 = meta.beta2;
        adam.eps = meta.eps;
        adam.step = meta.step;
        for (name, t) in &self.tensors {
            if let Some(p) = name.strip_prefix("adam.m.") {
                adam.m.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                adam.v.insert(p.to_string(), t.data().to_vec());
            }
        }
        Ok(Some(adam))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&serde_json::to_value(&self.header)?)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Format(format!("unknown dtype tag {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after tensor table".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
