//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `IMPASHCK`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a UTF-8 JSON header, then
//! the concatenated tensor payload as little-endian `f64`. The header holds
//! the resolved config, progress counters, queue pointers and an index of
//! every tensor (name, shape, offset and length in scalars).
//!
//! Writing is deterministic, so saving a loaded checkpoint reproduces the
//! original bytes.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::memory::FeatureQueue;
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"IMPASHCK";
pub const FORMAT_VERSION: u32 = 1;

const QUERY: &str = "query/";
const MOMENTUM: &str = "momentum/";
const VELOCITY: &str = "optim/velocity/";
const QUEUE1: &str = "queue1/buffer";
const QUEUE2: &str = "queue2/buffer";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimisation steps.
    pub step: u64,
    pub query: ParamStore,
    pub momentum: ParamStore,
    pub velocity: ParamStore,
    pub queue1: FeatureQueue,
    pub queue2: FeatureQueue,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct QueueState {
    write_ptr: usize,
    fill_count: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Config,
    epoch: u64,
    step: u64,
    queue1: QueueState,
    queue2: QueueState,
    tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: payload.len(),
                len: data.len(),
            });
            payload.extend_from_slice(data);
        };
        for (prefix, store) in [(QUERY, &self.query), (MOMENTUM, &self.momentum), (VELOCITY, &self.velocity)] {
            for p in store.params() {
                push(format!("{prefix}{}", p.name), p.shape.clone(), &p.data);
            }
        }
        for (name, q) in [(QUEUE1, &self.queue1), (QUEUE2, &self.queue2)] {
            let snap = q.snapshot();
            let data = snap.as_standard_layout();
            push(
                name.to_string(),
                vec![q.capacity(), q.dim()],
                data.as_slice().expect("standard layout"),
            );
        }
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            queue1: QueueState {
                write_ptr: self.queue1.write_ptr(),
                fill_count: self.queue1.fill_count(),
            },
            queue2: QueueState {
                write_ptr: self.queue2.write_ptr(),
                fill_count: self.queue2.fill_count(),
            },
            tensors,
        };
        let header = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| corrupt(e.to_string()))?;
        let payload = &bytes[body..];
        if payload.len() % 8 != 0 {
            return Err(corrupt("payload is not a whole number of f64 values"));
        }
        let n_scalars = payload.len() / 8;
        let read = |e: &TensorEntry| -> Result<Vec<f64>> {
            if e.shape.iter().product::<usize>() != e.len || e.offset + e.len > n_scalars {
                return Err(corrupt(format!("tensor `{}` is out of bounds or misshapen", e.name)));
            }
            Ok(payload[8 * e.offset..8 * (e.offset + e.len)]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let (mut query, mut momentum, mut velocity) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
        let (mut q1, mut q2) = (None, None);
        for e in &header.tensors {
            let data = read(e)?;
            let queue_buffer = || {
                if e.shape.len() != 2 {
                    return Err(corrupt(format!("queue tensor `{}` must be 2-d", e.name)));
                }
                Array2::from_shape_vec((e.shape[0], e.shape[1]), data.clone()).map_err(|err| corrupt(err.to_string()))
            };
            if let Some(name) = e.name.strip_prefix(QUERY) {
                query.add(name, e.shape.clone(), data);
            } else if let Some(name) = e.name.strip_prefix(MOMENTUM) {
                momentum.add(name, e.shape.clone(), data);
            } else if let Some(name) = e.name.strip_prefix(VELOCITY) {
                velocity.add(name, e.shape.clone(), data);
            } else if e.name == QUEUE1 {
                q1 = Some(queue_buffer()?);
            } else if e.name == QUEUE2 {
                q2 = Some(queue_buffer()?);
            } else {
                return Err(corrupt(format!("unexpected tensor `{}`", e.name)));
            }
        }
        query.check_structure(&momentum)?;
        query.check_structure(&velocity)?;
        let q1 = q1.ok_or_else(|| corrupt("missing queue1"))?;
        let q2 = q2.ok_or_else(|| corrupt("missing queue2"))?;
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            query,
            momentum,
            velocity,
            queue1: FeatureQueue::from_parts(q1, header.queue1.write_ptr, header.queue1.fill_count)?,
            queue2: FeatureQueue::from_parts(q2, header.queue2.write_ptr, header.queue2.fill_count)?,
        })
    }

    /// Write via a temporary sibling file and rename, so an interrupted save
    /// never leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let mut query = ParamStore::new();
        query.add("g.w", vec![2, 3], vec![1.0, -2.5, 3.25, 1e-300, f64::MIN_POSITIVE, 0.1]);
        query.add("p1.b", vec![2], vec![0.0, -0.0]);
        let mut momentum = query.clone();
        momentum.params_mut()[0].data[0] = 7.0;
        let velocity = query.zeros_like();
        let mut queue1 = FeatureQueue::new(4, 3, 1).unwrap();
        queue1.enqueue(Array2::from_shape_vec((1, 3), vec![0.0, 1.0, 0.0]).unwrap().view()).unwrap();
        Checkpoint {
            config: Config::desk(),
            epoch: 3,
            step: 24,
            query,
            momentum,
            velocity,
            queue1,
            queue2: FeatureQueue::new(4, 3, 2).unwrap(),
        }
    }

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        let ck = tiny();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = tiny().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..30]).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }
}
