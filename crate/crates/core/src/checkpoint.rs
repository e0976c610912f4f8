//! Versioned binary model files.
//!
//! ```text
//! "HCSM" | u32 version = 1 | u64 step
//! u32 len | run config, JSON
//! u32 count | count × (u32 len | word)            vocabulary
//! u32 count | count × (u32 len | name | u32 rank | rank × u32 dim | f32 data)
//! ```
//! All integers and floats are little endian.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::commands::RunConfig;
use crate::error::ModelError;
use crate::model::HcsaModel;
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 4] = b"HCSM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match its config: {0}")]
    Layout(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub step: u64,
    pub model: HcsaModel,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut buf, &serde_json::to_string(&self.config).expect("config serializes"));
        let words = &self.vocab.words()[..];
        put_u32(&mut buf, words.len());
        for w in words {
            put_str(&mut buf, w);
        }
        put_u32(&mut buf, self.model.params.len());
        for (name, t) in self.model.params.iter() {
            put_str(&mut buf, name);
            put_u32(&mut buf, t.rank());
            for &d in t.shape() {
                put_u32(&mut buf, d);
            }
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf
    }

    /// Rebuilds the model from the stored config and fills in the stored
    /// values; names and shapes must match exactly.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::Magic)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let step = r.u64()?;
        let config: RunConfig =
            serde_json::from_str(&r.string()?).map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
        let n_words = r.u32()?;
        let words = (0..n_words).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
        let vocab = Vocab::new(words.iter().skip(crate::vocab::SPECIALS.len()));
        if vocab.words() != &words[..] {
            return Err(CheckpointError::Corrupt("vocabulary does not start with the reserved tokens".into()));
        }
        let mut model = HcsaModel::new(config.model.clone())?;
        let count = r.u32()?;
        if count != model.params.len() {
            return Err(CheckpointError::Layout(format!(
                "{count} tensors stored, model has {}",
                model.params.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = r.string()?;
            if name != model.params.name(id) {
                return Err(CheckpointError::Layout(format!(
                    "expected tensor {}, found {name}",
                    model.params.name(id)
                )));
            }
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            if shape != model.params.get(id).shape() {
                return Err(CheckpointError::Layout(format!(
                    "{name}: stored shape {shape:?}, model expects {:?}",
                    model.params.get(id).shape()
                )));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(4 * n)?;
            for (dst, c) in model.params.get_mut(id).data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(CheckpointError::Corrupt(format!("{name}: non-finite value")));
                }
                *dst = v as f64;
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            vocab,
            step,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
