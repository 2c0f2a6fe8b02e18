//! Binary checkpoint layout:
//!
//! ```text
//! b"PMCK" | u64 header length | JSON header | u64 array count |
//! (u64 length | f64 values)* | SHA-256 of everything before it
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::TrainConfig;
use crate::artifact::write_atomic;
use crate::model::MotionModel;
use crate::numerics::Tensor;
use crate::skeleton::{NormStats, SkeletonTopology};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PMCK";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("corrupt checkpoint file: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("topology fingerprint mismatch: checkpoint has {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
}

/// A trained model with everything needed to use it on raw poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub norm: NormStats,
    pub model: MotionModel,
    pub epochs_completed: usize,
}

#[derive(Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub fingerprint: String,
    pub topology: SkeletonTopology,
    pub config: TrainConfig,
    pub norm: NormStats,
    pub epochs_completed: usize,
    pub num_scalars: usize,
    pub param_shapes: Vec<[usize; 2]>,
}

impl Checkpoint {
    pub fn fingerprint(&self) -> String {
        self.model.topology.fingerprint()
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            version: CHECKPOINT_VERSION,
            fingerprint: self.fingerprint(),
            topology: self.model.topology.clone(),
            config: self.config.clone(),
            norm: self.norm.clone(),
            epochs_completed: self.epochs_completed,
            num_scalars: self.model.num_scalars(),
            param_shapes: self.model.params().map(|p| [p.rows(), p.cols()]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec_pretty(&self.header()).expect("header serialises");
        let mut out = Vec::with_capacity(header.len() + 8 * self.model.num_scalars() + 128);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let params: Vec<&Tensor> = self.model.params().collect();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p.len() as u64).to_le_bytes());
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let (header, arrays) = parse(bytes)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: header.version, expected: CHECKPOINT_VERSION });
        }
        let actual = header.topology.fingerprint();
        if actual != header.fingerprint {
            return Err(CheckpointError::FingerprintMismatch { expected: header.fingerprint, found: actual });
        }
        let corrupt = |m: String| CheckpointError::Corrupt(m);
        header.topology.validate().map_err(|v| corrupt(format!("embedded topology invalid: {} problem(s)", v.len())))?;
        header.config.validate().map_err(|e| corrupt(format!("embedded config invalid: {e}")))?;
        let mut model = MotionModel::new(&header.topology, &header.config.model_config(), header.config.seed);
        let expected: Vec<usize> = model.params().map(Tensor::len).collect();
        if expected.len() != arrays.len() || header.param_shapes.len() != arrays.len() {
            return Err(corrupt(format!("expected {} parameter arrays, found {}", expected.len(), arrays.len())));
        }
        for (i, (p, values)) in model.params_mut().zip(arrays).enumerate() {
            let [r, c] = header.param_shapes[i];
            if p.rows() != r || p.cols() != c || values.len() != p.len() {
                return Err(corrupt(format!("parameter {i} has {} values, expected {}", values.len(), p.len())));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(corrupt(format!("parameter {i} holds non-finite values")));
            }
            p.data_mut().copy_from_slice(&values);
        }
        if header.norm.width() != model.width() {
            return Err(corrupt("normalisation stats width does not match the topology".into()));
        }
        Ok(Self { config: header.config, norm: header.norm, model, epochs_completed: header.epochs_completed })
    }

    /// Refuses a checkpoint trained on a different skeleton.
    pub fn ensure_topology(&self, topology: &SkeletonTopology) -> Result<(), CheckpointError> {
        let (expected, found) = (topology.fingerprint(), self.fingerprint());
        if expected == found {
            Ok(())
        } else {
            Err(CheckpointError::FingerprintMismatch { expected, found })
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn parse(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<Vec<f64>>), CheckpointError> {
    let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
    if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..4] != MAGIC {
        return Err(corrupt("missing checkpoint signature"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (file truncated or modified)"));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let len = r.u64("header length")? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| CheckpointError::Corrupt(format!("header is not valid JSON: {e}")))?;
    let count = r.u64("array count")? as usize;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let n = r.u64("array length")? as usize;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("array length overflow"))?, &format!("array {i}"))?;
        arrays.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after parameter arrays"));
    }
    Ok((header, arrays))
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &checkpoint.to_bytes()).map_err(|e| CheckpointError::Io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(path.display().to_string(), e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Reads only the JSON header (after verifying the checksum).
pub fn read_header(path: &Path) -> Result<CheckpointHeader, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(path.display().to_string(), e))?;
    Ok(parse(&bytes)?.0)
}
