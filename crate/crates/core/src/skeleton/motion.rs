use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::topology::hex;
use super::{SkeletonError, SkeletonTopology};

pub const MOTION_FILE_VERSION: u32 = 1;

/// Standard deviations below this are floored when normalising.
pub const STD_FLOOR: f64 = 1e-6;

/// `T` frames of flattened `J·C` poses.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub id: String,
    pub fps: f64,
    width: usize,
    data: Vec<f64>,
}

impl MotionSequence {
    pub fn new(id: impl Into<String>, fps: f64, width: usize, data: Vec<f64>) -> Result<Self, SkeletonError> {
        let id = id.into();
        let bad = |reason: String| SkeletonError::InvalidSequence { id: id.clone(), reason };
        if !(fps.is_finite() && fps > 0.0) {
            return Err(bad(format!("fps must be positive, got {fps}")));
        }
        if width == 0 || data.is_empty() || !data.len().is_multiple_of(width) {
            return Err(bad(format!("{} values do not form rows of width {width}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(bad(format!("frame {} has a non-finite entry", i / width)));
        }
        Ok(Self { id, fps, width, data })
    }

    pub fn from_frames(id: impl Into<String>, fps: f64, frames: &[Vec<f64>]) -> Result<Self, SkeletonError> {
        let id = id.into();
        let width = frames.first().map_or(0, Vec::len);
        if let Some(t) = frames.iter().position(|f| f.len() != width) {
            return Err(SkeletonError::InvalidSequence { id, reason: format!("frame {t} has a different width") });
        }
        Self::new(id, fps, width, frames.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.width..(t + 1) * self.width]
    }

    pub fn frames(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.width)
    }

    /// All frames flattened row-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn last_frame(&self) -> &[f64] {
        self.frame(self.len() - 1)
    }

    /// Frames `start..end` as a new sequence with the same id and rate.
    pub fn window(&self, start: usize, end: usize) -> MotionSequence {
        assert!(start < end && end <= self.len(), "window {start}..{end} of {} frames", self.len());
        Self {
            id: self.id.clone(),
            fps: self.fps,
            width: self.width,
            data: self.data[start * self.width..end * self.width].to_vec(),
        }
    }

    fn map_frames(&self, f: impl Fn(usize, f64) -> f64) -> MotionSequence {
        let w = self.width;
        let data = self.data.iter().enumerate().map(|(i, &v)| f(i % w, v)).collect();
        Self { id: self.id.clone(), fps: self.fps, width: w, data }
    }
}

/// Topology plus sequences, the in-memory form of a motion file.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionDataset {
    pub topology: SkeletonTopology,
    pub sequences: Vec<MotionSequence>,
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    id: String,
    fps: f64,
    frames: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MotionFile {
    version: u32,
    topology: SkeletonTopology,
    sequences: Vec<SequenceRecord>,
}

impl MotionDataset {
    pub fn new(topology: SkeletonTopology, sequences: Vec<MotionSequence>) -> Result<Self, SkeletonError> {
        topology.validate().map_err(SkeletonError::InvalidTopology)?;
        let w = topology.width();
        if let Some(s) = sequences.iter().find(|s| s.width() != w) {
            return Err(SkeletonError::InvalidSequence {
                id: s.id.clone(),
                reason: format!("row width {} != J·C = {w}", s.width()),
            });
        }
        Ok(Self { topology, sequences })
    }

    pub fn get(&self, id: &str) -> Option<&MotionSequence> {
        self.sequences.iter().find(|s| s.id == id)
    }

    /// Deterministic split: every `holdout_every`-th sequence (1-based) is
    /// held out for testing.
    pub fn split(&self, holdout_every: usize) -> (Vec<&MotionSequence>, Vec<&MotionSequence>) {
        assert!(holdout_every >= 2, "holdout_every must be at least 2");
        let (test, train): (Vec<_>, Vec<_>) =
            self.sequences.iter().enumerate().partition(|(i, _)| i % holdout_every == holdout_every - 1);
        (train.into_iter().map(|(_, s)| s).collect(), test.into_iter().map(|(_, s)| s).collect())
    }

    pub fn to_json(&self) -> String {
        let file = MotionFile {
            version: MOTION_FILE_VERSION,
            topology: self.topology.clone(),
            sequences: self
                .sequences
                .iter()
                .map(|s| SequenceRecord { id: s.id.clone(), fps: s.fps, frames: s.frames().map(<[f64]>::to_vec).collect() })
                .collect(),
        };
        serde_json::to_string(&file).expect("motion file serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SkeletonError> {
        let file: MotionFile = serde_json::from_str(text)?;
        if file.version != MOTION_FILE_VERSION {
            return Err(SkeletonError::UnsupportedVersion(file.version));
        }
        let sequences = file
            .sequences
            .into_iter()
            .map(|r| MotionSequence::from_frames(r.id, r.fps, &r.frames))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(file.topology, sequences)
    }

    pub fn read(path: &Path) -> Result<Self, SkeletonError> {
        let text = std::fs::read_to_string(path).map_err(|e| SkeletonError::Io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }
}

/// Per-channel mean and standard deviation of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics over every frame of `seqs`; channels whose
    /// deviation falls below [`STD_FLOOR`] are floored with a warning.
    pub fn compute<'a>(seqs: impl IntoIterator<Item = &'a MotionSequence>) -> Result<Self, SkeletonError> {
        let seqs: Vec<&MotionSequence> = seqs.into_iter().collect();
        let Some(first) = seqs.first() else {
            return Err(SkeletonError::EmptySplit);
        };
        let w = first.width();
        let n: usize = seqs.iter().map(|s| s.len()).sum();
        let mut mean = vec![0.0; w];
        for f in seqs.iter().flat_map(|s| s.frames()) {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; w];
        for f in seqs.iter().flat_map(|s| s.frames()) {
            for ((acc, v), m) in var.iter_mut().zip(f).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let s = (v / n as f64).sqrt();
                if s < STD_FLOOR {
                    log::warn!("channel {c} has near-zero variance; std floored at {STD_FLOOR}");
                    STD_FLOOR
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(width: usize) -> Self {
        Self { mean: vec![0.0; width], std: vec![1.0; width] }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, seq: &MotionSequence) -> MotionSequence {
        assert_eq!(seq.width(), self.width(), "stats width mismatch");
        seq.map_frames(|c, v| (v - self.mean[c]) / self.std[c].max(STD_FLOOR))
    }

    pub fn denormalize(&self, seq: &MotionSequence) -> MotionSequence {
        assert_eq!(seq.width(), self.width(), "stats width mismatch");
        seq.map_frames(|c, v| v * self.std[c].max(STD_FLOOR) + self.mean[c])
    }

    /// SHA-256 of the raw bits of both vectors, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex(&h.finalize())
    }
}
