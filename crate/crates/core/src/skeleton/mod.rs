//! Skeletal topology, body-part partitions, motion sequences and the JSON
//! motion file format.

mod motion;
mod topology;

pub use motion::{MotionDataset, MotionSequence, NormStats, MOTION_FILE_VERSION, STD_FLOOR};
pub use topology::{
    build_cross_adjacency, default_partitions, scheduled_partition, ChannelSemantics, PartPartition,
    SkeletonTopology, TopologyViolation,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("invalid topology: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidTopology(Vec<TopologyViolation>),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid sequence {id}: {reason}")]
    InvalidSequence { id: String, reason: String },
    #[error("cannot compute statistics of an empty split")]
    EmptySplit,
    #[error("unsupported motion file version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed motion file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot read {0}: {1}")]
    Io(String, #[source] std::io::Error),
}
