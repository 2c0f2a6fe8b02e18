use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{ModelConfig, MotionModel};
use crate::pfm::PfmConfig;
use crate::skeleton::{ChannelSemantics, MotionSequence, SkeletonTopology};

/// Two four-joint chains hanging off the root.
pub fn chain_pair() -> SkeletonTopology {
    SkeletonTopology {
        joint_names: (0..8).map(|i| format!("j{i}")).collect(),
        parents: vec![-1, 0, 1, 2, 0, 4, 5, 6],
        channels: 3,
        semantics: ChannelSemantics::Expmap,
        part_labels: ["a", "a", "a", "a", "b", "b", "b", "b"].map(String::from).to_vec(),
    }
}

/// Small model with non-trivial pose transform weights.
pub fn small_model(seed: u64) -> MotionModel {
    let config = ModelConfig { pfm: PfmConfig { hidden: 16, ..PfmConfig::default() }, ..ModelConfig::default() };
    let mut m = MotionModel::new(&chain_pair(), &config, seed);
    m.ptm.randomize(&mut ChaCha8Rng::seed_from_u64(seed + 100), 0.2);
    m
}

pub fn random_sequence(frames: usize, width: usize, seed: u64) -> MotionSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * width).map(|_| rng.random_range(-1.0..1.0)).collect();
    MotionSequence::new(format!("rand{seed}"), 25.0, width, data).unwrap()
}
