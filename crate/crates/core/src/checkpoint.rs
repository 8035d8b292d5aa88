//! Binary checkpoints: magic `HMMT`, `u32` version, the modality registry,
//! a JSON metadata block, then named tensor records. Little-endian throughout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{ModalityRegistry, ModalitySpec};
use crate::model::{Model, ModelConfig, SharingConfig, TaskHead};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HMMT";
pub const VERSION: u32 = 1;

const MAX_RANK: usize = 16;

/// Decoded checkpoint contents before interpretation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub registry: ModalityRegistry,
    pub meta: String,
    pub records: Vec<(String, Tensor)>,
}

pub fn encode(registry: &ModalityRegistry, meta: &str, records: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(registry.len() as u32);
    for spec in registry.entries() {
        w.str(&spec.name);
        w.u64(spec.channel_size as u64);
        w.u64(spec.extra_axes as u64);
        w.u64(spec.num_freq_bands as u64);
        w.f64(spec.max_freq);
        w.u64(spec.patch_size.unwrap_or(0) as u64);
    }
    w.u32(registry.aliases().len() as u32);
    for (alias, target) in registry.aliases() {
        w.str(alias);
        w.str(target);
    }
    w.u64(meta.len() as u64);
    w.bytes(meta.as_bytes());
    w.u64(records.len() as u64);
    for (name, t) in records {
        w.str(name);
        w.u32(t.rank() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let n_specs = r.u32()? as usize;
    let mut specs = Vec::new();
    for _ in 0..n_specs {
        let name = r.str()?;
        let channel_size = r.usize()?;
        let extra_axes = r.usize()?;
        let bands = r.usize()?;
        let max_freq = r.f64()?;
        let patch = r.usize()?;
        let mut spec = ModalitySpec::new(name, channel_size, extra_axes, bands, max_freq);
        if patch > 0 {
            spec = spec.with_patch(patch);
        }
        specs.push(spec);
    }
    let mut registry =
        ModalityRegistry::new(specs).map_err(|e| Error::Checkpoint(format!("registry: {e}")))?;
    for _ in 0..r.u32()? {
        let alias = r.str()?;
        let target = r.str()?;
        registry = registry
            .with_alias(alias, &target)
            .map_err(|e| Error::Checkpoint(format!("registry: {e}")))?;
    }
    let meta_len = r.usize()?;
    let meta = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
    let n_records = r.usize()?;
    let mut records = Vec::new();
    for _ in 0..n_records {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Checkpoint(format!(
                "record `{name}` has rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.usize()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0 && n <= r.remaining() / 8)
            .ok_or_else(|| {
                Error::Checkpoint(format!("record `{name}` has bad extents {shape:?}"))
            })?;
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        records.push((name, Tensor::new(shape, data)?));
    }
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            r.remaining()
        )));
    }
    Ok(RawCheckpoint {
        registry,
        meta,
        records,
    })
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} overflows")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

/// Everything besides tensors needed to rebuild a [`Model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub sharing: SharingConfig,
    pub tasks: Vec<TaskHead>,
    /// Free-form extra state (trainer bookkeeping).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

const BUFFER_PREFIX: &str = "buffer:";
const EXTRA_PREFIX: &str = "extra:";

/// Serializes a model plus optional extra tensors and metadata.
pub fn encode_model(
    model: &Model,
    extra_meta: &BTreeMap<String, serde_json::Value>,
    extra_tensors: &BTreeMap<String, Tensor>,
) -> Result<Vec<u8>> {
    let meta = ModelMeta {
        config: model.config().clone(),
        sharing: model.sharing(),
        tasks: model.tasks().to_vec(),
        extra: extra_meta.clone(),
    };
    let meta = serde_json::to_string(&meta)?;
    let names: Vec<(String, &Tensor)> = model
        .params()
        .iter()
        .map(|(k, t)| (k.clone(), t))
        .chain(
            model
                .buffers()
                .iter()
                .map(|(k, t)| (format!("{BUFFER_PREFIX}{k}"), t)),
        )
        .chain(
            extra_tensors
                .iter()
                .map(|(k, t)| (format!("{EXTRA_PREFIX}{k}"), t)),
        )
        .collect();
    let records: Vec<(&str, &Tensor)> = names.iter().map(|(k, t)| (k.as_str(), *t)).collect();
    Ok(encode(model.registry(), &meta, &records))
}

/// A decoded model with whatever extra state was stored next to it.
pub struct LoadedModel {
    pub model: Model,
    pub extra_meta: BTreeMap<String, serde_json::Value>,
    pub extra_tensors: BTreeMap<String, Tensor>,
}

pub fn decode_model(bytes: &[u8]) -> Result<LoadedModel> {
    let raw = decode(bytes)?;
    let meta: ModelMeta =
        serde_json::from_str(&raw.meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let mut extra_tensors = BTreeMap::new();
    for (name, t) in raw.records {
        let (map, key) = if let Some(k) = name.strip_prefix(BUFFER_PREFIX) {
            (&mut buffers, k.to_string())
        } else if let Some(k) = name.strip_prefix(EXTRA_PREFIX) {
            (&mut extra_tensors, k.to_string())
        } else {
            (&mut params, name)
        };
        if map.insert(key, t).is_some() {
            return Err(Error::Checkpoint("duplicate record name".into()));
        }
    }
    let model = Model::from_parts(
        meta.config,
        meta.sharing,
        raw.registry,
        meta.tasks,
        params,
        buffers,
    )
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(LoadedModel {
        model,
        extra_meta: meta.extra,
        extra_tensors,
    })
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(
        path,
        encode_model(model, &BTreeMap::new(), &BTreeMap::new())?,
    )?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Ok(decode_model(&fs::read(path)?)?.model)
}
