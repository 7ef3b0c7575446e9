//! Checkpoints: a little-endian tensor blob next to a JSON manifest.
//!
//! Blob layout: magic `EXPNDCKP`, `u32` version, `u32` tensor count, then per
//! tensor a `u32` name length, the UTF-8 name, a `u64` element count and the
//! `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Parameters};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"EXPNDCKP";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub blob: String,
    pub algo: String,
    pub seed: u64,
    pub episode: usize,
    pub env_steps: u64,
    pub epsilon: f64,
    pub replay_len: usize,
    pub replay_capacity: usize,
    pub replay_max_priority: f64,
    pub feedback_records: usize,
    /// Adam step counters by optimizer prefix.
    pub optimizer_steps: BTreeMap<String, u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(manifest: CheckpointManifest) -> Self {
        Self {
            manifest: CheckpointManifest {
                version: CHECKPOINT_VERSION,
                ..manifest
            },
            tensors: Vec::new(),
        }
    }

    pub fn add_params<P: Parameters<f32>>(&mut self, prefix: &str, params: &P) {
        for (name, t) in params.tensors() {
            self.tensors.push((format!("{prefix}.{name}"), t.to_vec()));
        }
    }

    pub fn add_optimizer(&mut self, prefix: &str, opt: &Adam<f32>) {
        self.manifest.optimizer_steps.insert(prefix.to_string(), opt.t);
        for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
            self.tensors.push((format!("{prefix}.m.{i}"), m.clone()));
            self.tensors.push((format!("{prefix}.v.{i}"), v.clone()));
        }
    }

    fn find(&self, name: &str) -> Result<&[f32]> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn restore_params<P: Parameters<f32>>(&self, prefix: &str, params: &mut P) -> Result<()> {
        for (name, dst) in params.tensors_mut() {
            let src = self.find(&format!("{prefix}.{name}"))?;
            if src.len() != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "{prefix}.{name}: stored {} values, network has {}",
                    src.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, prefix: &str, opt: &mut Adam<f32>) -> Result<()> {
        opt.t = *self
            .manifest
            .optimizer_steps
            .get(prefix)
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer {prefix}")))?;
        opt.m.clear();
        opt.v.clear();
        let mut i = 0;
        while let (Ok(m), Ok(v)) = (self.find(&format!("{prefix}.m.{i}")), self.find(&format!("{prefix}.v.{i}"))) {
            opt.m.push(m.to_vec());
            opt.v.push(v.to_vec());
            i += 1;
        }
        Ok(())
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, data) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn decode(bytes: &[u8]) -> Result<Vec<(String, Vec<f32>)>> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let n = cur.u64()? as usize;
            let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, data));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(tensors)
    }

    /// Write `<stem>.bin` and `<stem>.json` into `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let blob = format!("{stem}.bin");
        fs::write(dir.join(&blob), self.encode())?;
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            blob,
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    len: t.len(),
                })
                .collect(),
            ..self.manifest.clone()
        };
        let path = dir.join(format!("{stem}.json"));
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let tensors = Self::decode(&fs::read(dir.join(&manifest.blob))?)?;
        let listed: Vec<TensorEntry> = tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                len: t.len(),
            })
            .collect();
        if listed != manifest.tensors {
            return Err(Error::Checkpoint("manifest does not match blob".into()));
        }
        Ok(Self { manifest, tensors })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated blob".into()))?;
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
