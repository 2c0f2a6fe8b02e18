use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::Tensor;

use super::SkeletonError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelSemantics {
    /// Axis-angle rotations, three channels per joint.
    Expmap,
    Cartesian,
}

/// Joint graph plus per-joint channel layout and body-part labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    pub joint_names: Vec<String>,
    /// Parent joint index, or -1 for a root.
    pub parents: Vec<i64>,
    pub channels: usize,
    pub semantics: ChannelSemantics,
    pub part_labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TopologyViolation {
    TooFewJoints(usize),
    NoChannels,
    LengthMismatch { field: &'static str, expected: usize, found: usize },
    ParentOutOfRange { joint: usize, parent: i64 },
    Cycle { joint: usize },
    NoRoot,
    TooFewParts(usize),
}

impl fmt::Display for TopologyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TooFewJoints(j) => write!(f, "needs at least 2 joints, found {j}"),
            Self::NoChannels => write!(f, "needs at least 1 channel per joint"),
            Self::LengthMismatch { field, expected, found } => {
                write!(f, "{field} has {found} entries, expected {expected}")
            }
            Self::ParentOutOfRange { joint, parent } => write!(f, "joint {joint} has invalid parent {parent}"),
            Self::Cycle { joint } => write!(f, "cycle at joint {joint}"),
            Self::NoRoot => write!(f, "no root joint (parent -1)"),
            Self::TooFewParts(n) => write!(f, "needs ≥2 parts, found {n} distinct part label(s)"),
        }
    }
}

impl SkeletonTopology {
    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    /// Flattened pose width `J·C`.
    pub fn width(&self) -> usize {
        self.num_joints() * self.channels
    }

    /// Checks every structural invariant and reports all violations found.
    pub fn validate(&self) -> Result<(), Vec<TopologyViolation>> {
        let mut errs = Vec::new();
        let j = self.joint_names.len();
        if j < 2 {
            errs.push(TopologyViolation::TooFewJoints(j));
        }
        if self.channels == 0 {
            errs.push(TopologyViolation::NoChannels);
        }
        for (field, found) in [("parents", self.parents.len()), ("part_labels", self.part_labels.len())] {
            if found != j {
                errs.push(TopologyViolation::LengthMismatch { field, expected: j, found });
            }
        }
        if self.parents.len() == j {
            let mut parent_ok = true;
            for (joint, &p) in self.parents.iter().enumerate() {
                if p < -1 || p >= j as i64 {
                    errs.push(TopologyViolation::ParentOutOfRange { joint, parent: p });
                    parent_ok = false;
                }
            }
            if parent_ok {
                if !self.parents.contains(&-1) && j > 0 {
                    errs.push(TopologyViolation::NoRoot);
                }
                errs.extend(self.cycles().into_iter().map(|joint| TopologyViolation::Cycle { joint }));
            }
        }
        let parts = self.part_labels.iter().collect::<BTreeSet<_>>().len();
        if parts < 2 {
            errs.push(TopologyViolation::TooFewParts(parts));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// Smallest joint index of every parent cycle.
    fn cycles(&self) -> Vec<usize> {
        let j = self.parents.len();
        let mut found = BTreeSet::new();
        for start in 0..j {
            let mut seen = vec![false; j];
            let mut cur = start;
            loop {
                if seen[cur] {
                    // `cur` is on a cycle; collect it to report its minimum.
                    let mut members = vec![cur];
                    let mut k = self.parents[cur] as usize;
                    while k != cur {
                        members.push(k);
                        k = self.parents[k] as usize;
                    }
                    found.insert(*members.iter().min().expect("non-empty"));
                    break;
                }
                seen[cur] = true;
                match self.parents[cur] {
                    -1 => break,
                    p => cur = p as usize,
                }
            }
        }
        found.into_iter().collect()
    }

    /// Undirected skeletal edges as `(parent, child)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parents
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= 0)
            .map(|(c, &p)| (p as usize, c))
            .collect()
    }

    pub fn connected(&self, a: usize, b: usize) -> bool {
        self.parents[a] == b as i64 || self.parents[b] == a as i64
    }

    /// Tree depth of every joint (roots at 0). Assumes a valid topology.
    pub fn depths(&self) -> Vec<usize> {
        (0..self.num_joints())
            .map(|mut k| {
                let mut d = 0;
                while self.parents[k] >= 0 {
                    k = self.parents[k] as usize;
                    d += 1;
                }
                d
            })
            .collect()
    }

    /// Distinct part labels in first-appearance order.
    pub fn parts(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for l in &self.part_labels {
            if !out.contains(&l.as_str()) {
                out.push(l);
            }
        }
        out
    }

    /// Joints carrying each label, in [`parts`](Self::parts) order.
    pub fn part_joints(&self) -> Vec<Vec<usize>> {
        self.parts()
            .iter()
            .map(|p| (0..self.num_joints()).filter(|&j| self.part_labels[j] == *p).collect())
            .collect()
    }

    /// SHA-256 over the canonical JSON encoding, hex encoded.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("topology serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Disjoint cover of the joints into a passive set `I1` and an active set `I2`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartPartition {
    first: Vec<usize>,
    second: Vec<usize>,
}

impl PartPartition {
    pub fn new(first: Vec<usize>, second: Vec<usize>, num_joints: usize) -> Result<Self, SkeletonError> {
        if first.is_empty() || second.is_empty() {
            return Err(SkeletonError::InvalidPartition("both index sets must be non-empty".into()));
        }
        let mut seen = vec![false; num_joints];
        for &j in first.iter().chain(&second) {
            if j >= num_joints {
                return Err(SkeletonError::InvalidPartition(format!("joint {j} out of range")));
            }
            if std::mem::replace(&mut seen[j], true) {
                return Err(SkeletonError::InvalidPartition(format!("joint {j} appears twice")));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(SkeletonError::InvalidPartition(format!("joint {missing} not covered")));
        }
        Ok(Self { first, second })
    }

    /// Passive set `I1`.
    pub fn first(&self) -> &[usize] {
        &self.first
    }

    /// Active set `I2`.
    pub fn second(&self) -> &[usize] {
        &self.second
    }

    pub fn swapped(&self) -> Self {
        Self { first: self.second.clone(), second: self.first.clone() }
    }
}

/// The two base partitions that alternate through the coupling stack:
/// the root's body part against everything else, and even against odd tree
/// depth (every bone crosses the second split).
pub fn default_partitions(t: &SkeletonTopology) -> [PartPartition; 2] {
    let j = t.num_joints();
    let root = t.parents.iter().position(|&p| p < 0).unwrap_or(0);
    let root_label = &t.part_labels[root];
    let (by_part_a, by_part_b): (Vec<usize>, Vec<usize>) = (0..j).partition(|&k| &t.part_labels[k] == root_label);
    let depths = t.depths();
    let (even, odd): (Vec<usize>, Vec<usize>) = (0..j).partition(|&k| depths[k].is_multiple_of(2));
    [
        PartPartition::new(by_part_a, by_part_b, j).expect("≥2 labels give two non-empty sets"),
        PartPartition::new(even, odd, j).expect("a tree with ≥2 joints has both depth parities"),
    ]
}

/// Partition used by coupling layer `layer`: the base partitions alternate
/// every two layers and the passive side flips every layer.
pub fn scheduled_partition(bases: &[PartPartition; 2], layer: usize) -> PartPartition {
    let base = &bases[(layer / 2) % 2];
    if layer % 2 == 1 {
        base.swapped()
    } else {
        base.clone()
    }
}

/// Row-normalised bipartite adjacency `|I2| × |I1|`: entry `(i, j)` is
/// positive iff joints `I2[i]` and `I1[j]` share a bone. A row with no bone
/// into `I1` becomes uniform.
pub fn build_cross_adjacency(t: &SkeletonTopology, p: &PartPartition) -> Tensor {
    let (rows, cols) = (p.second.len(), p.first.len());
    let mut data = Vec::with_capacity(rows * cols);
    for &a in &p.second {
        let row: Vec<f64> = p.first.iter().map(|&b| if t.connected(a, b) { 1.0 } else { 0.0 }).collect();
        let deg: f64 = row.iter().sum();
        if deg > 0.0 {
            data.extend(row.iter().map(|v| v / deg));
        } else {
            data.extend(std::iter::repeat_n(1.0 / cols as f64, cols));
        }
    }
    Tensor::matrix(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo(parents: Vec<i64>, labels: &[&str]) -> SkeletonTopology {
        SkeletonTopology {
            joint_names: (0..parents.len()).map(|i| format!("j{i}")).collect(),
            parents,
            channels: 3,
            semantics: ChannelSemantics::Expmap,
            part_labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn chain_is_valid() {
        assert_eq!(topo(vec![-1, 0, 1], &["a", "a", "b"]).validate(), Ok(()));
    }

    #[test]
    fn cycle_is_reported_at_lowest_joint() {
        let errs = topo(vec![-1, 2, 1], &["a", "a", "b"]).validate().unwrap_err();
        let msgs: Vec<String> = errs.iter().map(ToString::to_string).collect();
        assert_eq!(msgs, vec!["cycle at joint 1"]);
    }

    #[test]
    fn single_part_label_is_rejected() {
        let errs = topo(vec![-1, 0, 1], &["a", "a", "a"]).validate().unwrap_err();
        assert!(errs.iter().any(|e| e.to_string().starts_with("needs ≥2 parts")));
    }

    #[test]
    fn all_violations_are_collected() {
        let mut t = topo(vec![-1, 5], &["a"]);
        t.channels = 0;
        let errs = t.validate().unwrap_err();
        assert!(errs.contains(&TopologyViolation::NoChannels));
        assert!(errs.contains(&TopologyViolation::ParentOutOfRange { joint: 1, parent: 5 }));
        assert!(errs.iter().any(|e| matches!(e, TopologyViolation::LengthMismatch { field: "part_labels", .. })));
    }

    #[test]
    fn chain_cross_adjacency_splits_evenly() {
        let t = topo(vec![-1, 0, 1], &["a", "b", "a"]);
        let p = PartPartition::new(vec![0, 2], vec![1], 3).unwrap();
        let a = build_cross_adjacency(&t, &p);
        assert_eq!(a.shape(), &[1, 2]);
        assert_eq!(a.data(), &[0.5, 0.5]);
    }

    #[test]
    fn star_center_gets_uniform_row() {
        let t = topo(vec![-1, 0, 0, 0, 0], &["c", "l", "l", "l", "l"]);
        let p = PartPartition::new(vec![1, 2, 3, 4], vec![0], 5).unwrap();
        assert_eq!(build_cross_adjacency(&t, &p).data(), &[0.25; 4]);
    }

    #[test]
    fn isolated_active_joint_falls_back_to_uniform() {
        let t = topo(vec![-1, 0, 1, 2], &["a", "a", "b", "b"]);
        // joint 3 only touches joint 2, which is in I2 as well
        let p = PartPartition::new(vec![0, 1], vec![2, 3], 4).unwrap();
        let a = build_cross_adjacency(&t, &p);
        assert_eq!(a.row(0), &[0.0, 1.0]);
        assert_eq!(a.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn partition_rejects_overlap_and_gaps() {
        assert!(PartPartition::new(vec![0, 1], vec![1, 2], 3).is_err());
        assert!(PartPartition::new(vec![0], vec![2], 3).is_err());
        assert!(PartPartition::new(vec![], vec![0, 1], 2).is_err());
    }

    #[test]
    fn default_partitions_cover_and_rows_sum_to_one() {
        let t = topo(vec![-1, 0, 1, 2, 0, 4, 5, 6], &["up", "up", "up", "up", "lo", "lo", "lo", "lo"]);
        let bases = default_partitions(&t);
        for layer in 0..8 {
            let p = scheduled_partition(&bases, layer);
            let mut all: Vec<usize> = p.first().iter().chain(p.second()).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..8).collect::<Vec<_>>());
            let a = build_cross_adjacency(&t, &p);
            for r in 0..a.rows() {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(bases[0].first(), &[0, 1, 2, 3]);
        assert_eq!(bases[1].first(), &[0, 2, 5, 7]);
    }
}
