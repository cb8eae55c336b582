//! Binary checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "MLN1" | u32 version | u32 meta_len | meta (JSON) | u32 tensor_count
//! per tensor: u16 name_len | name (UTF-8) | u8 dtype (0 = f32) | u8 rank
//!             | rank x u64 dims | f32 data
//! ```
//!
//! Model tensors use their parameter names. Other tables use a prefix such
//! as `ema/`, `adam_m/` or `adam_v/`.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::medlitenet::MedLiteNet;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MLN1";
pub const VERSION: u32 = 1;
pub const EMA_PREFIX: &str = "ema/";

const MAX_RANK: usize = 8;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub best_val_dice: Option<f64>,
    #[serde(default)]
    pub epoch: Option<usize>,
    #[serde(default)]
    pub step: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            what: "checkpoint",
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    /// Every stored tensor of the model, running statistics included.
    pub fn from_model(model: &MedLiteNet<f32>) -> Self {
        let mut ck = Self::new(CheckpointMeta {
            model: model.config.clone(),
            ..Default::default()
        });
        ck.push_store("", &model.store, false);
        ck
    }

    /// Appends `store` tensors under `prefix`, optionally trainable ones only.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>, trainable_only: bool) {
        for (_, p) in store.iter() {
            if !trainable_only || p.kind.trainable() {
                self.tensors.push((format!("{prefix}{}", p.name), p.value.clone()));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with(prefix))
    }

    /// Fills `store` from the tensors named `prefix + name`. Buffers missing
    /// under a non-empty prefix fall back to their unprefixed entry.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        for (_, p) in store.iter_mut() {
            let key = format!("{prefix}{}", p.name);
            let t = match self.get(&key) {
                Some(t) => t,
                None if !prefix.is_empty() && p.kind == ParamKind::Buffer => self
                    .get(&p.name)
                    .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks tensor `{}`", p.name)))?,
                None => return Err(Error::InvalidArgument(format!("checkpoint lacks tensor `{key}`"))),
            };
            if t.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor `{key}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// Rebuilds the model stored here. With `requested`, the stored config
    /// must match it exactly. `prefer_ema` loads the EMA shadow if present.
    pub fn to_model(&self, requested: Option<&ModelConfig>, prefer_ema: bool) -> Result<MedLiteNet<f32>> {
        if let Some(req) = requested {
            if req != &self.meta.model {
                return Err(Error::config(
                    "model",
                    "checkpoint was saved with a different model configuration",
                ));
            }
        }
        let mut model = MedLiteNet::build(&self.meta.model, 0)?;
        let prefix = if prefer_ema && self.has_prefix(EMA_PREFIX) { EMA_PREFIX } else { "" };
        self.restore_store(prefix, &mut model.store)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::InvalidArgument(format!("cannot encode checkpoint metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.rank() > MAX_RANK {
                return Err(Error::InvalidArgument(format!("tensor `{name}` cannot be encoded")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(0);
            out.push(t.rank() as u8);
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
        if r.take(4, "magic")? != MAGIC {
            r.pos = 0;
            return Err(r.err("bad magic, expected \"MLN1\""));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            r.pos -= 4;
            return Err(r.err(format!("unsupported version {version}")));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_at = r.pos;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| {
            Error::Parse {
                what: "checkpoint",
                offset: meta_at as u64,
                reason: format!("bad metadata: {e}"),
            }
        })?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Parse {
                    what: "checkpoint",
                    offset: at as u64,
                    reason: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            if !seen.insert(name.clone()) {
                r.pos = at;
                return Err(r.err(format!("duplicate tensor name `{name}`")));
            }
            let dtype = r.u8("dtype")?;
            if dtype != 0 {
                r.pos -= 1;
                return Err(r.err(format!("unsupported dtype {dtype}")));
            }
            let rank = r.u8("rank")? as usize;
            if rank > MAX_RANK {
                r.pos -= 1;
                return Err(r.err(format!("rank {rank} exceeds {MAX_RANK}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| r.err("tensor size overflows"))?;
            let raw = r.take(numel, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, tensors })
    }

    /// Writes atomically: a temporary file in the target directory is renamed
    /// over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> MedLiteNet<f32> {
        MedLiteNet::build(&ModelConfig::micro(), 11).unwrap()
    }

    #[test]
    fn bytes_roundtrip_is_exact() {
        let ck = Checkpoint::from_model(&micro());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_and_corruption_report_offsets() {
        let bytes = Checkpoint::from_model(&micro()).to_bytes().unwrap();
        for cut in [0, 3, 7, 11, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Parse { .. }), "cut {cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        match Checkpoint::from_bytes(&bad).unwrap_err() {
            Error::Parse { offset, reason, .. } => {
                assert_eq!(offset, 0);
                assert!(reason.contains("magic"));
            }
            e => panic!("{e}"),
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        match Checkpoint::from_bytes(&bad).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 4),
            e => panic!("{e}"),
        }
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn model_roundtrip_and_config_mismatch() {
        let m = micro();
        let ck = Checkpoint::from_model(&m);
        let back = ck.to_model(Some(&ModelConfig::micro()), true).unwrap();
        for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.value, b.value);
        }
        assert!(ck.to_model(Some(&ModelConfig::small()), false).is_err());
    }

    #[test]
    fn ema_table_restores_with_buffer_fallback() {
        let m = micro();
        let mut ema = m.store.clone();
        for (_, p) in ema.iter_mut() {
            if p.kind.trainable() {
                p.value.data_mut().iter_mut().for_each(|v| *v += 1.0);
            }
        }
        let mut ck = Checkpoint::from_model(&m);
        ck.push_store(EMA_PREFIX, &ema, true);
        let loaded = ck.to_model(None, true).unwrap();
        for ((_, a), (_, b)) in loaded.store.iter().zip(ema.iter()) {
            assert_eq!(a.value, b.value);
        }
        let raw = ck.to_model(None, false).unwrap();
        for ((_, a), (_, b)) in raw.store.iter().zip(m.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint::from_model(&micro());
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(Checkpoint::load(&dir.path().join("none")), Err(Error::Io { .. })));
    }
}
