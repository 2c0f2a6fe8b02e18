//! The forecaster as one parameterised object: a pose transform and a latent
//! forecaster over the same skeleton.
//!
//! The model works in normalised pose units; callers normalise observations
//! with the training statistics stored next to it in a checkpoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, Tensor, Var};
use crate::pfm::{Pfm, PfmConfig};
use crate::ptm::{PtmConfig, PtmStack};
use crate::skeleton::SkeletonTopology;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub ptm: PtmConfig,
    pub pfm: PfmConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionModel {
    pub topology: SkeletonTopology,
    pub ptm: PtmStack,
    pub pfm: Pfm,
}

/// Model parameters registered on one graph, in [`MotionModel::params`] order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub ptm: Vec<Var>,
    pub pfm: Vec<Var>,
}

impl BoundModel {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.ptm.iter().chain(&self.pfm).copied()
    }
}

impl MotionModel {
    /// Identity pose transform (zero coupling weights, unit scales) and a
    /// randomly initialised forecaster.
    pub fn new(topology: &SkeletonTopology, config: &ModelConfig, seed: u64) -> Self {
        let ptm = PtmStack::new(topology, &config.ptm);
        let mut pfm = Pfm::new(topology, &config.pfm);
        pfm.randomize(&mut ChaCha8Rng::seed_from_u64(seed));
        Self { topology: topology.clone(), ptm, pfm }
    }

    pub fn width(&self) -> usize {
        self.topology.width()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.ptm.params().chain(self.pfm.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.ptm.params_mut().chain(self.pfm.params_mut())
    }

    /// Number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    /// Registers the parameters as differentiable leaves (`trainable`) or as
    /// constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.input(t.clone()) };
        let ptm = self.ptm.params().map(&mut leaf).collect();
        let pfm = self.pfm.params().map(&mut leaf).collect();
        BoundModel { ptm, pfm }
    }
}
