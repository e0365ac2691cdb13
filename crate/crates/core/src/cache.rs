//! Server-side activation cache backed by an append-only log.
//!
//! Epoch-1 records are appended as they arrive; `MsgEpochDone` seals the
//! cache and every later epoch replays it. The on-disk layout is documented
//! in CACHE.md:
//!
//! ```text
//! file   := "PAEC" version:u8 session_id:u64 entry*
//! entry  := len:u32 crc32(payload):u32 payload[len]
//! payload:= 0x01 batch_index:u32 B:u32 L:u32 H:u32 C:u32 ids:u64*B acts:f32*(L·B·H) dy:f32*(B·C)
//!         | 0x02 record_count:u64                      (seal marker)
//! ```
//!
//! A short final entry is a torn write: recovery truncates it and reports
//! the loss. A checksum failure on a complete entry is corruption and
//! invalidates the cache.

use crate::numerics::Tensor;
use crate::protocol::MsgActivationRecord;
use log::warn;
use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const FILE_MAGIC: &[u8; 4] = b"PAEC";
const FILE_VERSION: u8 = 1;
const FILE_HEADER_LEN: usize = 13;
const KIND_RECORD: u8 = 1;
const KIND_SEAL: u8 = 2;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache is sealed")]
    Sealed,
    #[error("cache is not sealed")]
    NotSealed,
    #[error("duplicate sample id {0}")]
    DuplicateSample(u64),
    #[error("sealing with {expected} expected samples but cache holds {actual}")]
    CountMismatch { expected: u64, actual: u64 },
    #[error("corrupt cache entry at record {index} (offset {offset}): {reason}")]
    Corrupt {
        index: usize,
        offset: u64,
        reason: String,
    },
    #[error("bad cache file header: {0}")]
    Header(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

/// One cached batch: pivot activations and masked targets as received.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedRecord {
    pub batch_index: u32,
    pub sample_ids: Vec<u64>,
    pub num_layers: usize,
    pub hidden: usize,
    pub num_classes: usize,
    /// `L × [B × H]`, layer-major, exactly the wire values.
    pub activations: Vec<f32>,
    /// `[B × C]`
    pub delta_y: Vec<f32>,
}

impl CachedRecord {
    pub fn from_msg(m: &MsgActivationRecord) -> Self {
        Self {
            batch_index: m.batch_index,
            sample_ids: m.sample_ids.clone(),
            num_layers: m.num_layers as usize,
            hidden: m.hidden as usize,
            num_classes: m.num_classes as usize,
            activations: m.activations.clone(),
            delta_y: m.delta_y.clone(),
        }
    }

    pub fn batch(&self) -> usize {
        self.sample_ids.len()
    }

    /// Per-layer `[B × H]` tensors widened to `f64`.
    pub fn layer_tensors(&self) -> Vec<Tensor> {
        let n = self.batch() * self.hidden;
        self.activations
            .chunks_exact(n)
            .map(|c| {
                Tensor::new(
                    vec![self.batch(), self.hidden],
                    c.iter().map(|&v| v as f64).collect(),
                )
                .expect("record dimensions validated on entry")
            })
            .collect()
    }

    pub fn delta_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.batch(), self.num_classes],
            self.delta_y.iter().map(|&v| v as f64).collect(),
        )
        .expect("record dimensions validated on entry")
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            21 + 8 * self.sample_ids.len() + 4 * (self.activations.len() + self.delta_y.len()),
        );
        out.push(KIND_RECORD);
        for v in [
            self.batch_index,
            self.sample_ids.len() as u32,
            self.num_layers as u32,
            self.hidden as u32,
            self.num_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.sample_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for v in self.activations.iter().chain(&self.delta_y) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn decode(p: &[u8]) -> Option<Self> {
        if p.len() < 21 || p[0] != KIND_RECORD {
            return None;
        }
        let u = |i: usize| u32::from_le_bytes(p[i..i + 4].try_into().unwrap()) as usize;
        let (batch_index, b, l, h, c) = (u(1) as u32, u(5), u(9), u(13), u(17));
        let n_act = l.checked_mul(b)?.checked_mul(h)?;
        let n_dy = b.checked_mul(c)?;
        let want = 21 + 8 * b + 4 * (n_act + n_dy);
        if p.len() != want {
            return None;
        }
        let mut pos = 21;
        let sample_ids = (0..b)
            .map(|i| u64::from_le_bytes(p[pos + 8 * i..pos + 8 * i + 8].try_into().unwrap()))
            .collect();
        pos += 8 * b;
        let floats: Vec<f32> = p[pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Some(Self {
            batch_index,
            sample_ids,
            num_layers: l,
            hidden: h,
            num_classes: c,
            activations: floats[..n_act].to_vec(),
            delta_y: floats[n_act..].to_vec(),
        })
    }
}

/// What recovery found beyond the intact records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryReport {
    pub records: usize,
    pub sealed: bool,
    /// Bytes of an incomplete trailing entry that were cut off.
    pub truncated_tail_bytes: Option<u64>,
}

#[derive(Debug)]
struct CacheLog {
    file: File,
    path: PathBuf,
}

#[derive(Debug)]
pub struct ActivationCache {
    session_id: u64,
    records: Vec<CachedRecord>,
    ids: HashSet<u64>,
    sealed: bool,
    log: Option<CacheLog>,
}

impl ActivationCache {
    pub fn in_memory(session_id: u64) -> Self {
        Self {
            session_id,
            records: Vec::new(),
            ids: HashSet::new(),
            sealed: false,
            log: None,
        }
    }

    /// Starts a fresh log at `path`, replacing any existing file.
    pub fn create(path: impl Into<PathBuf>, session_id: u64) -> Result<Self, CacheError> {
        let path = path.into();
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .read(true)
            .open(&path)?;
        let mut header = Vec::with_capacity(FILE_HEADER_LEN);
        header.extend_from_slice(FILE_MAGIC);
        header.push(FILE_VERSION);
        header.extend_from_slice(&session_id.to_le_bytes());
        file.write_all(&header)?;
        file.sync_data()?;
        Ok(Self {
            log: Some(CacheLog { file, path }),
            ..Self::in_memory(session_id)
        })
    }

    /// Default log file name for a session inside `dir`.
    pub fn log_path(dir: &Path, session_id: u64) -> PathBuf {
        dir.join(format!("session-{session_id:016x}.paec"))
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    pub fn records(&self) -> &[CachedRecord] {
        &self.records
    }

    pub fn sample_count(&self) -> u64 {
        self.records.iter().map(|r| r.batch() as u64).sum()
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn path(&self) -> Option<&Path> {
        self.log.as_ref().map(|l| l.path.as_path())
    }

    pub fn contains_sample(&self, id: u64) -> bool {
        self.ids.contains(&id)
    }

    pub fn append(&mut self, record: CachedRecord) -> Result<(), CacheError> {
        if self.sealed {
            return Err(CacheError::Sealed);
        }
        let mut batch_ids = HashSet::with_capacity(record.batch());
        for &id in &record.sample_ids {
            if self.ids.contains(&id) || !batch_ids.insert(id) {
                return Err(CacheError::DuplicateSample(id));
            }
        }
        if let Some(log) = &mut self.log {
            write_entry(&mut log.file, &record.encode())?;
        }
        self.ids.extend(batch_ids);
        self.records.push(record);
        Ok(())
    }

    /// Makes the cache read-only. The sample count must match what the
    /// session announced.
    pub fn seal(&mut self, expected_samples: u64) -> Result<(), CacheError> {
        if self.sealed {
            return Err(CacheError::Sealed);
        }
        let actual = self.sample_count();
        if actual != expected_samples {
            return Err(CacheError::CountMismatch {
                expected: expected_samples,
                actual,
            });
        }
        if let Some(log) = &mut self.log {
            let mut payload = vec![KIND_SEAL];
            payload.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
            write_entry(&mut log.file, &payload)?;
            log.file.sync_data()?;
        }
        self.sealed = true;
        Ok(())
    }

    /// Rebuilds a cache from its log, truncating a torn final entry.
    pub fn recover(path: impl Into<PathBuf>) -> Result<(Self, RecoveryReport), CacheError> {
        let path = path.into();
        let mut file = OpenOptions::new().read(true).write(true).open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        if bytes.len() < FILE_HEADER_LEN {
            return Err(CacheError::Header("file shorter than header".into()));
        }
        if &bytes[..4] != FILE_MAGIC {
            return Err(CacheError::Header("bad magic".into()));
        }
        if bytes[4] != FILE_VERSION {
            return Err(CacheError::Header(format!("version {}", bytes[4])));
        }
        let session_id = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
        let mut cache = Self::in_memory(session_id);
        let mut pos = FILE_HEADER_LEN;
        let mut index = 0;
        let mut truncated = None;
        while pos < bytes.len() {
            let rest = bytes.len() - pos;
            let len = if rest >= 8 {
                u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize
            } else {
                usize::MAX
            };
            if rest < 8 || rest - 8 < len {
                truncated = Some(rest as u64);
                break;
            }
            let corrupt = |reason: &str| CacheError::Corrupt {
                index,
                offset: pos as u64,
                reason: reason.to_string(),
            };
            let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
            let payload = &bytes[pos + 8..pos + 8 + len];
            if crc32fast::hash(payload) != crc {
                return Err(corrupt("checksum mismatch"));
            }
            if cache.sealed {
                return Err(corrupt("entry after seal marker"));
            }
            match payload.first() {
                Some(&KIND_RECORD) => {
                    let rec = CachedRecord::decode(payload)
                        .ok_or_else(|| corrupt("malformed record payload"))?;
                    cache.append(rec).map_err(|e| corrupt(&e.to_string()))?;
                }
                Some(&KIND_SEAL) if payload.len() == 9 => {
                    let n = u64::from_le_bytes(payload[1..9].try_into().unwrap());
                    if n != cache.records.len() as u64 {
                        return Err(corrupt("seal count disagrees with records"));
                    }
                    cache.sealed = true;
                }
                _ => return Err(corrupt("unknown entry kind")),
            }
            pos += 8 + len;
            index += 1;
        }
        if let Some(lost) = truncated {
            warn!(
                "cache {}: truncating torn tail of {lost} bytes after {} records",
                path.display(),
                cache.records.len()
            );
            file.set_len(pos as u64)?;
            file.sync_data()?;
        }
        let report = RecoveryReport {
            records: cache.records.len(),
            sealed: cache.sealed,
            truncated_tail_bytes: truncated,
        };
        // Reopen for appends at the recovered end.
        let file = OpenOptions::new().append(true).read(true).open(&path)?;
        cache.log = Some(CacheLog { file, path });
        Ok((cache, report))
    }
}

fn write_entry(file: &mut File, payload: &[u8]) -> io::Result<()> {
    let mut entry = Vec::with_capacity(8 + payload.len());
    entry.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    entry.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    entry.extend_from_slice(payload);
    file.write_all(&entry)
}
