//! Versioned binary checkpoint container.
//!
//! Layout: `FCDACKPT` magic, `u32` format version, `u64` header length, a
//! JSON header, then the raw little-endian `f64` payload of every tensor in
//! header order. Values are written bit-for-bit, so a round trip is exact.

use super::{AdamConfig, AdamState, Group, NetworkSpec, ParameterStore};
use crate::autodiff::Tensor;
use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"FCDACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("corrupt checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint has no tensor `{0}`")]
    Missing(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Exact ChaCha stream position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        if self.seed.len() != 64 {
            return Err(CheckpointError::Corrupt("rng seed must be 32 bytes".into()));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16)
                .map_err(|_| CheckpointError::Corrupt("rng seed is not hex".into()))?;
        }
        let word_pos: u128 = self.word_pos.parse().map_err(|_| CheckpointError::Corrupt("bad rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<Group>,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    step: u64,
    names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    architecture: NetworkSpec,
    config_digest: String,
    rng: Option<RngState>,
    adam: IndexMap<String, AdamMeta>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub architecture: NetworkSpec,
    pub config_digest: String,
    pub rng: Option<RngState>,
    /// Free-form run metadata (stage, iteration counters, encoder state, ...).
    pub meta: serde_json::Value,
    tensors: IndexMap<String, (Option<Group>, Tensor)>,
    adam: IndexMap<String, AdamMeta>,
}

impl Checkpoint {
    pub fn new(architecture: NetworkSpec, config_digest: impl Into<String>) -> Self {
        Self {
            architecture,
            config_digest: config_digest.into(),
            rng: None,
            meta: serde_json::Value::Null,
            tensors: IndexMap::new(),
            adam: IndexMap::new(),
        }
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, group: Option<Group>, t: Tensor) {
        self.tensors.insert(name.into(), (group, t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).map(|(_, t)| t).ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    pub fn put_store(&mut self, prefix: &str, store: &ParameterStore) {
        for (name, p) in store.iter() {
            self.put_tensor(format!("{prefix}/{name}"), Some(p.group), p.tensor.clone());
        }
    }

    pub fn take_store(&self, prefix: &str) -> Result<ParameterStore> {
        let p = format!("{prefix}/");
        let mut store = ParameterStore::new();
        for (name, (group, t)) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&p) {
                let group = group.ok_or_else(|| CheckpointError::Corrupt(format!("`{name}` has no group")))?;
                store.insert(rest, group, t.clone()).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            }
        }
        if store.is_empty() {
            return Err(CheckpointError::Missing(format!("{prefix}/*")));
        }
        Ok(store)
    }

    pub fn put_adam(&mut self, prefix: &str, adam: &AdamState) {
        let names: Vec<String> = adam.m.keys().cloned().collect();
        for name in &names {
            self.put_tensor(format!("{prefix}.m/{name}"), None, adam.m[name].clone());
            self.put_tensor(format!("{prefix}.v/{name}"), None, adam.v[name].clone());
        }
        self.adam.insert(prefix.to_string(), AdamMeta { config: adam.config, step: adam.step, names });
    }

    pub fn take_adam(&self, prefix: &str) -> Result<AdamState> {
        let meta = self.adam.get(prefix).ok_or_else(|| CheckpointError::Missing(format!("adam state `{prefix}`")))?;
        let mut state = AdamState::new(meta.config);
        state.step = meta.step;
        for name in &meta.names {
            state.m.insert(name.clone(), self.tensor(&format!("{prefix}.m/{name}"))?.clone());
            state.v.insert(name.clone(), self.tensor(&format!("{prefix}.v/{name}"))?.clone());
        }
        Ok(state)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            format_version: FORMAT_VERSION,
            architecture: self.architecture.clone(),
            config_digest: self.config_digest.clone(),
            rng: self.rng.clone(),
            adam: self.adam.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, (group, t))| TensorEntry { name: name.clone(), group: *group, shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for (_, t) in self.tensors.values() {
            buf.clear();
            buf.reserve(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut tensors = IndexMap::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            let t = Tensor::new(e.shape, data).ok_or_else(|| CheckpointError::Corrupt(e.name.clone()))?;
            tensors.insert(e.name, (e.group, t));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            architecture: header.architecture,
            config_digest: header.config_digest,
            rng: header.rng,
            meta: header.meta,
            tensors,
            adam: header.adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = std::fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(f);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
