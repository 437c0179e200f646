//! Binary checkpoint format.
//!
//! ```text
//! "NHLX" | u32 version | [u8; 32] graph hash | u32 epoch | u64 step
//! | u8 channels | f32 mean[channels] | f32 std[channels]
//! | u32 count | tensor * count            (parameters)
//! | u32 count | tensor * count            (optimizer state)
//! | [u8; 32] sha256 of everything above
//!
//! tensor = u16 name_len | name | u8 dtype (0 = f32) | u8 ndim | u32 dims[ndim] | f32 payload
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::dataset::Normalization;
use crate::runtime::{ParameterStore, Tensor};
use crate::topology::ComputeGraph;

pub const MAGIC: &[u8; 4] = b"NHLX";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {0} is not supported")]
    VersionUnsupported(u32),
    #[error("checkpoint was written for graph {expected}, not {found}")]
    HashMismatch { expected: String, found: String },
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub graph_hash: [u8; 32],
    pub epoch: u32,
    pub params: ParameterStore<f32>,
    pub normalization: Normalization,
}

/// The hash a checkpoint must carry to serve `g`: its source graph's hash for
/// experts, its own content hash otherwise.
pub fn checkpoint_hash_for(g: &ComputeGraph) -> String {
    g.source_hash
        .clone()
        .unwrap_or_else(|| g.content_hash_hex())
}

impl Checkpoint {
    pub fn graph_hash_hex(&self) -> String {
        hex::encode(self.graph_hash)
    }

    /// Fails with `HashMismatch` unless this checkpoint was written for `g`
    /// or for the graph `g` was extracted from.
    pub fn check_graph(&self, g: &ComputeGraph) -> Result<(), CheckpointError> {
        let own = hex::encode(self.graph_hash);
        if g.content_hash_hex() == own || g.source_hash.as_deref() == Some(own.as_str()) {
            Ok(())
        } else {
            Err(CheckpointError::HashMismatch {
                expected: own,
                found: checkpoint_hash_for(g),
            })
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend_from_slice(&self.graph_hash);
        out.extend(self.epoch.to_le_bytes());
        out.extend(self.params.step.to_le_bytes());
        let n = &self.normalization;
        out.push(n.mean.len() as u8);
        for v in n.mean.iter().chain(&n.std) {
            out.extend(v.to_le_bytes());
        }
        write_table(&mut out, self.params.iter());
        write_table(&mut out, self.params.state().iter());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
        if version != VERSION {
            return Err(CheckpointError::VersionUnsupported(version));
        }
        if bytes.len() < 8 + 32 + 32 {
            return Err(CheckpointError::Corrupt("file too short".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(CheckpointError::Corrupt("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, at: 8 };
        let graph_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let epoch = r.u32()?;
        let step = r.u64()?;
        let c = r.u8()? as usize;
        let mut floats = Vec::with_capacity(2 * c);
        for _ in 0..2 * c {
            floats.push(r.f32()?);
        }
        let normalization = Normalization {
            std: floats.split_off(c),
            mean: floats,
        };
        let mut params = ParameterStore::new();
        for (name, t) in r.table()? {
            if params.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
            }
        }
        for (name, t) in r.table()? {
            params.state_mut().insert(name, t);
        }
        params.step = step;
        if r.at != body.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Checkpoint {
            graph_hash,
            epoch,
            params,
            normalization,
        })
    }
}

fn write_table<'a>(out: &mut Vec<u8>, entries: impl Iterator<Item = (&'a String, &'a Tensor<f32>)>) {
    let entries: Vec<_> = entries.collect();
    out.extend((entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend((name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend((d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| CheckpointError::Corrupt("unexpected end of data".into()))?;
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn table(&mut self) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = self.u16()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = self.u8()?;
            if dtype != DTYPE_F32 {
                return Err(CheckpointError::Corrupt(format!("{name}: dtype {dtype}")));
            }
            let ndim = self.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(self.u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let payload = self.take(numel * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            out.push((name, t));
        }
        Ok(out)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    // Write then rename so an interrupted save never leaves a partial file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes()).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads a checkpoint and checks it against `g` unless `force` is set.
pub fn load_checkpoint_for(
    path: &Path,
    g: &ComputeGraph,
    force: bool,
) -> Result<Checkpoint, CheckpointError> {
    let ckpt = load_checkpoint(path)?;
    if !force {
        ckpt.check_graph(g)?;
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::init_parameters;
    use crate::topology::{build_baseline, ResNetConfig, Shape};

    fn sample() -> (ComputeGraph, Checkpoint) {
        let g = build_baseline(&ResNetConfig::mini(), 10, Shape::new(1, 28, 28)).unwrap();
        let mut params: ParameterStore<f32> = init_parameters(&g, 3);
        params.step = 42;
        params
            .state_mut()
            .insert("momentum:fc.bias".into(), Tensor::full(&[10], 0.25));
        let ckpt = Checkpoint {
            graph_hash: g.content_hash(),
            epoch: 2,
            params,
            normalization: Normalization::mnist(),
        };
        (g, ckpt)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (g, ckpt) = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        back.check_graph(&g).unwrap();
    }

    #[test]
    fn corruption_is_detected() {
        let (_, ckpt) = sample();
        let bytes = ckpt.to_bytes();
        for at in [60, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x01;
            assert!(Checkpoint::from_bytes(&bad).is_err(), "flip at {at}");
        }
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 5]),
            Err(CheckpointError::Corrupt(_))
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(CheckpointError::BadMagic)));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&version),
            Err(CheckpointError::VersionUnsupported(9))
        ));
    }

    #[test]
    fn hash_is_enforced() {
        let (_, ckpt) = sample();
        let other = build_baseline(&ResNetConfig::mini(), 9, Shape::new(1, 28, 28)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.nhl");
        save_checkpoint(&path, &ckpt).unwrap();
        assert!(matches!(
            load_checkpoint_for(&path, &other, false),
            Err(CheckpointError::HashMismatch { .. })
        ));
        assert_eq!(load_checkpoint_for(&path, &other, true).unwrap(), ckpt);
    }
}
