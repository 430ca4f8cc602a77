//! Embedding store keyed by `(utt_id, condition)`, with a line-oriented text
//! format and a checksummed binary format.
//!
//! Text records are `<utt_id> <condition> <dim> <v1> ... <vdim>`, one per line.
//! Binary files start with the magic `EMB1`; each record is
//!
//! ```text
//! u32 id_len | id | u32 cond_len | cond | u32 dim | dim x f32 | u32 crc32
//! ```
//!
//! with all integers and floats little-endian and the CRC taken over every
//! record byte before it.

use crate::embedding::{Embedding, VectorError};
use crate::fsutil::atomic_write;
use std::collections::HashMap;
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const BINARY_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate key ({utt_id}, {condition})")]
    Duplicate { utt_id: String, condition: String },
    #[error("dimension mismatch: store has dim {expected}, record has {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("no embedding for ({utt_id}, {condition})")]
    NotFound { utt_id: String, condition: String },
    #[error("corrupt record at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid embedding ({utt_id}, {condition}): {source}")]
    Invalid {
        utt_id: String,
        condition: String,
        source: VectorError,
    },
    #[error("key ({utt_id}, {condition}) must be non-empty and free of whitespace")]
    BadKey { utt_id: String, condition: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl StoreError {
    pub fn is_not_found(&self) -> bool {
        matches!(self, StoreError::NotFound { .. })
    }
}

/// In-memory embedding store. Records keep insertion order so that
/// serialization is stable.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    dim: Option<usize>,
    records: Vec<Embedding>,
    index: HashMap<(String, String), usize>,
}

impl EmbeddingStore {
    /// An empty store that only accepts embeddings of dimension `dim`.
    pub fn with_dim(dim: usize) -> Self {
        EmbeddingStore {
            dim: Some(dim),
            ..Default::default()
        }
    }

    /// Dimension of the store, fixed by construction or by the first record.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn put(&mut self, e: Embedding) -> Result<(), StoreError> {
        e.validate().map_err(|source| StoreError::Invalid {
            utt_id: e.utt_id.clone(),
            condition: e.condition.clone(),
            source,
        })?;
        if e.condition.is_empty()
            || e.utt_id.contains(char::is_whitespace)
            || e.condition.contains(char::is_whitespace)
        {
            return Err(StoreError::BadKey {
                utt_id: e.utt_id.clone(),
                condition: e.condition.clone(),
            });
        }
        match self.dim {
            Some(d) if d != e.dim() => {
                return Err(StoreError::DimMismatch {
                    expected: d,
                    got: e.dim(),
                })
            }
            Some(_) => {}
            None => self.dim = Some(e.dim()),
        }
        let key = (e.utt_id.clone(), e.condition.clone());
        if self.index.contains_key(&key) {
            return Err(StoreError::Duplicate {
                utt_id: key.0,
                condition: key.1,
            });
        }
        self.index.insert(key, self.records.len());
        self.records.push(e);
        Ok(())
    }

    pub fn get(&self, utt_id: &str, condition: &str) -> Result<&Embedding, StoreError> {
        // HashMap<(String, String)> can't be probed with borrowed tuples.
        self.index
            .get(&(utt_id.to_string(), condition.to_string()))
            .map(|&i| &self.records[i])
            .ok_or_else(|| StoreError::NotFound {
                utt_id: utt_id.to_string(),
                condition: condition.to_string(),
            })
    }

    pub fn contains(&self, utt_id: &str, condition: &str) -> bool {
        self.index
            .contains_key(&(utt_id.to_string(), condition.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Embedding> {
        self.records.iter()
    }

    /// Distinct condition tags, in first-seen order.
    pub fn conditions(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.condition) {
                out.push(r.condition.clone());
            }
        }
        out
    }

    /// Merges `other` into `self`; fails on the first duplicate or dim mismatch.
    pub fn extend(&mut self, other: EmbeddingStore) -> Result<(), StoreError> {
        for e in other.records {
            self.put(e)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.records {
            out.push_str(&e.utt_id);
            out.push(' ');
            out.push_str(&e.condition);
            out.push(' ');
            out.push_str(&e.dim().to_string());
            for v in &e.values {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, StoreError> {
        let mut store = EmbeddingStore::default();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |reason: String| StoreError::Parse {
                line: line_no,
                reason,
            };
            let mut fields = line.split(' ');
            let utt = fields.next().unwrap_or_default();
            let cond = fields
                .next()
                .ok_or_else(|| parse_err("missing condition".into()))?;
            let dim: usize = fields
                .next()
                .ok_or_else(|| parse_err("missing dim".into()))?
                .parse()
                .map_err(|e| parse_err(format!("bad dim: {e}")))?;
            let values = fields
                .map(|f| f.parse::<f32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| parse_err(format!("bad value: {e}")))?;
            if values.len() != dim {
                return Err(parse_err(format!(
                    "declared dim {dim} but found {} values",
                    values.len()
                )));
            }
            store.put(Embedding {
                utt_id: utt.to_string(),
                condition: cond.to_string(),
                values,
            })?;
        }
        Ok(store)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = BINARY_MAGIC.to_vec();
        for e in &self.records {
            let start = out.len();
            put_bytes(&mut out, e.utt_id.as_bytes());
            put_bytes(&mut out, e.condition.as_bytes());
            out.extend_from_slice(&(e.dim() as u32).to_le_bytes());
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < 4 || &bytes[..4] != BINARY_MAGIC {
            return Err(StoreError::Corrupt {
                offset: 0,
                reason: "missing EMB1 magic".into(),
            });
        }
        let mut store = EmbeddingStore::default();
        let mut cur = Cursor { bytes, pos: 4 };
        while cur.pos < bytes.len() {
            let start = cur.pos;
            let utt = cur.string()?;
            let cond = cur.string()?;
            let dim = cur.u32()? as usize;
            let raw = cur.take(dim.checked_mul(4).ok_or_else(|| cur.corrupt("dim overflow"))?)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let payload_end = cur.pos;
            let crc = cur.u32()?;
            if crc32fast::hash(&bytes[start..payload_end]) != crc {
                return Err(StoreError::Corrupt {
                    offset: start,
                    reason: "checksum mismatch".into(),
                });
            }
            store.put(Embedding {
                utt_id: utt,
                condition: cond,
                values,
            })?;
        }
        Ok(store)
    }

    /// Loads either format, detected by the binary magic.
    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(BINARY_MAGIC) {
            Self::from_binary(&bytes)
        } else {
            let text = String::from_utf8(bytes).map_err(|e| StoreError::Corrupt {
                offset: e.utf8_error().valid_up_to(),
                reason: "text store is not UTF-8".into(),
            })?;
            Self::from_text(&text)
        }
    }

    pub fn save_text(&self, path: &Path) -> Result<(), StoreError> {
        Ok(atomic_write(path, self.to_text().as_bytes())?)
    }

    pub fn save_binary(&self, path: &Path) -> Result<(), StoreError> {
        Ok(atomic_write(path, &self.to_binary())?)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn corrupt(&self, reason: &str) -> StoreError {
        StoreError::Corrupt {
            offset: self.pos,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt("truncated record"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String, StoreError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| StoreError::Corrupt {
            offset: at,
            reason: "key is not UTF-8".into(),
        })
    }
}
